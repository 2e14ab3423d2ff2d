"""Recommendation by conformative filtering over a hierarchical latent tree model of tastes."""

from .cof import (ConformativeFilter, CoverageQuery, GroupProfiles, ScoredList, coverage_bound,
                  coverage_simulate, group_profiles, memberships, recommend, score_all, user_vector)
from .evaluation import EvalReport, ItemKNN, Popularity, UserKNN, evaluate, grid_search, run_protocol
from .hlta import HierarchyConfig, build_hierarchy, hierarchy_report
from .ingest import (EventLog, InteractionMatrix, binarize, core_filter, merge, parse_events,
                     split_by_time, truncate_history, write_events)
from .ltm import LatentTreeModel, ModelVariable

__version__ = "0.1.0"

__all__ = [
    "ConformativeFilter", "CoverageQuery", "EvalReport", "EventLog", "GroupProfiles", "HierarchyConfig",
    "InteractionMatrix", "ItemKNN", "LatentTreeModel", "ModelVariable", "Popularity", "ScoredList",
    "UserKNN", "binarize", "build_hierarchy", "core_filter", "coverage_bound", "coverage_simulate",
    "evaluate", "grid_search", "group_profiles", "hierarchy_report", "memberships", "merge",
    "parse_events", "recommend", "run_protocol", "score_all", "split_by_time", "truncate_history",
    "user_vector", "write_events",
]
