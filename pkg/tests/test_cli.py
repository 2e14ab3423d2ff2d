import json

import pytest

from cofrec import ltm, synthetic
from cofrec.cli import main
from cofrec.evaluation import run_protocol
from cofrec.ingest import parse_events, split_by_time, write_events


def write_log(path, triples):
    path.write_text("".join(f"{u}\t{i}\t{t}\n" for u, i, t in triples))
    return str(path)


@pytest.fixture
def planted_files(tmp_path):
    _, events = synthetic.planted_log(600, 11)
    paths = {}
    for name, part in zip(("train", "valid", "test"), split_by_time(events)):
        p = tmp_path / f"{name}.tsv"
        with open(p, "w") as fh:
            write_events(part, fh)
        paths[name] = str(p)
    return paths


def read_log(path):
    with open(path) as fh:
        return parse_events(fh)


def load_model(path):
    with open(path) as fh:
        return ltm.load(fh)


def lines(capsys):
    return capsys.readouterr().out.strip().splitlines()


class TestBound:
    def test_published_value(self, capsys):
        assert main(["bound", "--items", "1000", "--picks", "20", "--coverage", "0.9", "--confidence", "0.9"]) == 0
        assert lines(capsys) == ["136"]

    def test_simulation_lines(self, capsys):
        main(["--seed", "1", "bound", "--items", "100", "--picks", "5", "--coverage", "0.5", "--confidence", "0.9",
              "--simulate", "200"])
        out = lines(capsys)
        assert out[1] == "simulated_trials\t200" and out[2].startswith("P(distinct>=qN)\t")

    def test_out_of_domain(self, capsys):
        rc = main(["bound", "--items", "100", "--picks", "5", "--coverage", "0.95", "--confidence", "0.9"])
        assert rc == 1 and "error" in capsys.readouterr().err

    def test_missing_option(self, capsys):
        assert main(["bound", "--items", "100"]) == 1


class TestUsage:
    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as e:
            main(["bound", "--frobnicate"])
        assert e.value.code != 0

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as e:
            main(["fly"])
        assert e.value.code != 0

    def test_missing_input_file(self, tmp_path, capsys):
        assert main(["split", "--input", str(tmp_path / "nope.tsv")]) == 1

    def test_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"bound": {"items": 1000, "picks": 20, "coverage": 0.9, "confidence": 0.9}}))
        assert main(["--config", str(cfg), "bound"]) == 0
        assert lines(capsys) == ["136"]

    def test_config_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"bound": {"colour": 3}}))
        assert main(["--config", str(cfg), "bound"]) == 1
        assert "unknown option" in capsys.readouterr().err


class TestSplit:
    def test_sizes(self, tmp_path, capsys):
        src = write_log(tmp_path / "all.tsv", [(f"u{k % 7}", f"i{k}", k) for k in range(100)])
        assert main(["split", "--input", src, "--out-dir", str(tmp_path / "out")]) == 0
        counts = [int(l.split("\t")[2]) for l in lines(capsys)]
        assert counts == [70, 15, 15]
        assert len(read_log(tmp_path / "out" / "test.tsv")) == 15

    def test_multichar_delimiter_and_columns(self, tmp_path, capsys):
        src = tmp_path / "ratings.dat"
        src.write_text("".join(f"{k % 4}::{k}::5::{1000 + k}\n" for k in range(20)))
        assert main(["--delimiter", "::", "--columns", "user,item,rating,timestamp", "split", "--input", str(src),
                     "--out-dir", str(tmp_path / "o")]) == 0
        assert [int(l.split("\t")[2]) for l in lines(capsys)] == [14, 3, 3]
        assert (tmp_path / "o" / "train.tsv").read_text().splitlines()[0] == "0::0::1000"

    def test_bad_fractions(self, tmp_path, capsys):
        src = write_log(tmp_path / "all.tsv", [("u", "i", 1)])
        assert main(["split", "--input", src, "--fractions", "0.5,0.2,0.2", "--out-dir", str(tmp_path)]) == 1

    def test_malformed_line(self, tmp_path, capsys):
        p = tmp_path / "bad.tsv"
        p.write_text("u\ti\t1\nu\ti\n")
        assert main(["split", "--input", str(p), "--out-dir", str(tmp_path)]) == 1
        assert "line 2" in capsys.readouterr().err


class TestTrainInspectRecommend:
    def test_train_is_deterministic(self, planted_files, tmp_path, capsys):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert main(["train", "--train", planted_files["train"], "--model", str(a)]) == 0
        assert main(["train", "--train", planted_files["train"], "--model", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
        report = (tmp_path / "a.json.report.tsv").read_text().splitlines()
        assert report[0] == "latent\tlevel\tchild\tp_child_given_s1\tp_child_given_s0"
        assert all(len(r.split("\t")) == 5 for r in report[1:])

    def test_inspect(self, planted_files, tmp_path, capsys):
        m = tmp_path / "m.json"
        main(["train", "--train", planted_files["train"], "--model", str(m)])
        capsys.readouterr()
        model = load_model(m)
        z = model.latents_at(1)[0].id
        assert main(["inspect", "--model", str(m), "--latent", z]) == 0
        out = lines(capsys)
        assert out[0].startswith(f"{z}\tlevel=1\tP(s1)=") and out[1] == "child\tP(child=1|s1)\tP(child=1|s0)"
        assert main(["inspect", "--model", str(m), "--latent", "nope"]) == 1
        assert z in capsys.readouterr().err
        assert main(["inspect", "--model", str(m), "--latent", model.items[0]]) == 1

    def test_recommend(self, planted_files, tmp_path, capsys):
        m = tmp_path / "m.json"
        main(["train", "--train", planted_files["train"], "--model", str(m)])
        capsys.readouterr()
        user = read_log(planted_files["train"]).active_users()[0]
        assert main(["recommend", "--model", str(m), "--train", planted_files["train"], "--user", user,
                     "--top", "3"]) == 0
        rows = [l.split("\t") for l in lines(capsys)]
        assert [r[2] for r in rows] == ["1", "2", "3"] and all(r[0] == user for r in rows)
        seen = read_log(planted_files["train"]).per_user_items()[user]
        assert not {r[1] for r in rows} & seen
        scores = [float(r[3]) for r in rows]
        assert scores == sorted(scores, reverse=True)

    def test_recommend_needs_users(self, planted_files, tmp_path, capsys):
        m = tmp_path / "m.json"
        main(["train", "--train", planted_files["train"], "--model", str(m)])
        assert main(["recommend", "--model", str(m), "--train", planted_files["train"]]) == 1


class TestEvaluate:
    def test_popularity_by_hand(self, tmp_path, capsys):
        train = write_log(tmp_path / "tr.tsv", [("u1", "a", 1), ("u2", "a", 2), ("u2", "b", 3), ("u3", "a", 4),
                                                 ("u3", "b", 5), ("u3", "c", 6), ("u1", "d", 7)])
        test = write_log(tmp_path / "te.tsv", [("u1", "c", 10), ("u2", "d", 11), ("u3", "d", 12)])
        assert main(["evaluate", "--method", "pop", "--train", train, "--test", test, "--top", "1,5"]) == 0
        out = lines(capsys)
        assert out[0] == "method\tparams\tR\trecall\tdiversity\tndcg\tevaluated\tskipped"
        # popularity a=3, b=2, c=1, d=1 (ties by id): u1 -> b, c; u2 -> c, d; u3 -> d
        r1 = out[1].split("\t")
        assert r1[2] == "1" and float(r1[3]) == pytest.approx(1 / 3) and r1[4] == "3"
        r5 = out[2].split("\t")
        assert float(r5[3]) == pytest.approx(1.0) and r5[6] == "3"

    def test_saved_model_matches_in_memory(self, planted_files, tmp_path, capsys):
        m = tmp_path / "m.json"
        main(["train", "--train", planted_files["train"], planted_files["valid"], "--model", str(m)])
        capsys.readouterr()
        out = tmp_path / "r.json"
        assert main(["evaluate", "--train", planted_files["train"], "--valid", planted_files["valid"],
                     "--test", planted_files["test"], "--model", str(m), "--grid-H", "2,full",
                     "--out", str(out), "--json"]) == 0
        doc = json.loads(out.read_text())
        assert json.loads(capsys.readouterr().out) == doc
        tr, va, te = (read_log(planted_files[k]) for k in ("train", "valid", "test"))
        res = run_protocol("cof", tr, va, te, H_grid=(2, None), model=load_model(m))
        assert doc["report"]["recall_at"]["5"] == pytest.approx(res.report.recall_at[5], abs=1e-12)
        assert doc["selected"]["H"] in (2, "full")

    def test_curves_file(self, planted_files, tmp_path, capsys):
        curves = tmp_path / "c.tsv"
        assert main(["evaluate", "--train", planted_files["train"], "--valid", planted_files["valid"],
                     "--test", planted_files["test"], "--grid-H", "1,full", "--top", "5",
                     "--emit-curves", str(curves)]) == 0
        rows = curves.read_text().splitlines()
        assert rows[0] == "series\tvalue\tR\trecall\tdiversity"
        assert {r.split("\t")[0] for r in rows[1:]} == {"H", "l"}

    def test_baselines(self, planted_files, capsys):
        for method in ("uknn", "iknn"):
            assert main(["evaluate", "--method", method, "--train", planted_files["train"],
                         "--test", planted_files["test"], "--k", "10", "--top", "5"]) == 0
            assert lines(capsys)[1].startswith(f"{method}\tk=10\t5\t")
