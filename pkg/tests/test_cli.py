import json

import pytest

from occlutrack import suite
from occlutrack.cli import (
    EXIT_ACCEPTANCE, EXIT_INVARIANT, EXIT_OK, EXIT_USAGE, ablation_problems, main, variant_name,
)
from occlutrack.metrics import EvalResult, OcclusionProfile


def write_cfg(path, **values):
    path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()))
    return str(path)


@pytest.fixture(scope="module")
def parallel_scenario(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(root / "parallel.cfg", **{"sim.pattern": "parallel", "sim.n_objects": 3, "sim.frames": 15})
    assert main(["simulate", "--config", cfg, "--seed", "4", "--out", str(root / "scen")]) == EXIT_OK
    return root / "scen"


def tree(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


class TestSimulateTrackEval:
    def test_simulate_artifacts(self, parallel_scenario):
        files = tree(parallel_scenario)
        assert {"seqinfo.ini", "gt/gt.txt", "det/det.txt", "manifest.json"} <= set(files)
        manifest = json.loads(files["manifest.json"])
        assert manifest["seed"] == 4 and manifest["subcommand"] == "simulate"

    def test_simulate_reproducible(self, parallel_scenario, tmp_path):
        cfg = write_cfg(tmp_path / "c.cfg", **{"sim.pattern": "parallel", "sim.n_objects": 3, "sim.frames": 15})
        main(["simulate", "--config", cfg, "--seed", "4", "--out", str(tmp_path / "again")])
        a, b = tree(parallel_scenario), tree(tmp_path / "again")
        a.pop("manifest.json"), b.pop("manifest.json")
        assert a == b

    def test_track_is_byte_reproducible(self, parallel_scenario, tmp_path):
        for name in ("a", "b"):
            assert main(["track", str(parallel_scenario), "--out", str(tmp_path / name)]) == EXIT_OK
        assert tree(tmp_path / "a") == tree(tmp_path / "b")

    def test_attention_off_identical_without_overlap(self, parallel_scenario, tmp_path):
        main(["track", str(parallel_scenario), "--out", str(tmp_path / "full")])
        main(["track", str(parallel_scenario), "--ta", "off", "--da", "off", "--out", str(tmp_path / "off")])
        full = (tmp_path / "full" / "results.txt").read_bytes()
        assert full and full == (tmp_path / "off" / "results.txt").read_bytes()
        manifest = json.loads((tmp_path / "off" / "manifest.json").read_text())
        assert manifest["variant"] == "no_ta_da"
        assert manifest["flags"]["use_ta"] is False

    def test_eval_writes_csvs(self, parallel_scenario, tmp_path):
        main(["track", str(parallel_scenario), "--out", str(tmp_path / "t")])
        code = main(["eval", str(parallel_scenario / "gt" / "gt.txt"), str(tmp_path / "t" / "results.txt"),
                     "--variant", "full", "--out", str(tmp_path / "e")])
        assert code == EXIT_OK
        rows = (tmp_path / "e" / "eval.csv").read_text().splitlines()
        assert rows[0].startswith("variant,mota") and rows[1].startswith("full,")
        assert len((tmp_path / "e" / "occlusion.csv").read_text().splitlines()) == 11


class TestExitCodes:
    def test_unknown_subcommand(self, tmp_path):
        assert main(["fly", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_bad_config(self, tmp_path):
        cfg = write_cfg(tmp_path / "bad.cfg", **{"sim.frames": "many"})
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_USAGE

    def test_missing_input(self, tmp_path):
        assert main(["track", str(tmp_path / "absent"), "--out", str(tmp_path / "o")]) == EXIT_USAGE

    def test_malformed_results(self, parallel_scenario, tmp_path):
        bad = tmp_path / "r.txt"
        bad.write_text("1,1,0,0,-4,4,1,-1,-1,-1\n")
        assert main(["eval", str(parallel_scenario / "gt" / "gt.txt"), str(bad), "--out", str(tmp_path)]) == EXIT_USAGE

    def test_invalid_sim_config_is_invariant_error(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.cfg", **{"sim.world_width": 250})
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_INVARIANT

    def test_help(self):
        assert main(["--help"]) == EXIT_OK

    def test_defaults(self, capsys):
        assert main(["defaults"]) == EXIT_OK
        assert "tracker.o_min" in capsys.readouterr().out


class TestAblate:
    def test_small_suite(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.cfg", **{"suite.scenarios": 2, "sim.frames": 20})
        code = main(["ablate", "--config", cfg, "--variant-all", "--out", str(tmp_path / "o")])
        assert code in (EXIT_OK, EXIT_ACCEPTANCE)
        rows = (tmp_path / "o" / "ablation.csv").read_text().splitlines()
        assert [r.split(",")[0] for r in rows[1:]] == list(suite.ALL_VARIANTS)
        drift = (tmp_path / "o" / "drift.csv").read_text().splitlines()
        assert drift[0] == "variant,tracked,total,rate" and len(drift) == 8

    def test_single_variant_from_flags(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.cfg", **{"suite.scenarios": 1, "sim.frames": 12})
        assert main(["ablate", "--config", cfg, "--memory", "off", "--out", str(tmp_path / "o")]) == EXIT_OK
        assert json.loads((tmp_path / "o" / "manifest.json").read_text())["variants"] == ["no_memory"]

    @staticmethod
    def report(mota, through):
        r = EvalResult(mota, 1.0, 0, 0, 0, 10)
        return suite.VariantReport("x", r, OcclusionProfile(), through, 100)

    def test_problems_empty_when_full_wins(self):
        reps = {n: self.report(0.5, 20) for n in suite.ALL_VARIANTS}
        reps["full"] = self.report(0.9, 40)
        assert ablation_problems(reps) == []

    def test_problems_flag_tie_and_small_gain(self):
        reps = {n: self.report(0.5, 30) for n in suite.ALL_VARIANTS}
        reps["full"] = self.report(0.5, 40)
        problems = ablation_problems(reps)
        assert len(problems) == 2 and "not strictly above" in problems[0]

    @pytest.mark.parametrize("name", list(suite.ALL_VARIANTS))
    def test_variant_names_round_trip(self, name):
        flags = {"use_ta": True, "use_da": True, "use_memory": True, "adaptive_weight": True,
                 **suite.ALL_VARIANTS[name]}
        assert variant_name(flags) == name


def test_gradcheck_passes(tmp_path):
    assert main(["gradcheck", "--out", str(tmp_path)]) == EXIT_OK
    rows = (tmp_path / "gradcheck.csv").read_text().splitlines()[1:]
    assert rows and all(r.endswith(",pass") for r in rows)


def test_train_embed_tiny(tmp_path):
    cfg = write_cfg(tmp_path / "c.cfg", **{"train.steps": 3, "train.attention_steps": 2})
    assert main(["train-embed", "--config", cfg, "--seed", "1", "--out", str(tmp_path / "a")]) == EXIT_OK
    main(["train-embed", "--config", cfg, "--seed", "1", "--out", str(tmp_path / "b")])
    assert tree(tmp_path / "a") == tree(tmp_path / "b")
    assert len((tmp_path / "a" / "loss.csv").read_text().splitlines()) == 4
    assert main(["track", "--help"]) == EXIT_OK
