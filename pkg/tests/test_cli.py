"""Command line surface: flows, exit codes, determinism, report files."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from zippypoint.cli import main
from zippypoint.homeval import AugmentationConfig, make_synthetic_dataset
from zippypoint.imgio import write_pnm
from zippypoint.matcher import DescriptorSet
from zippypoint.netgraph import (
    Detection,
    NetworkSpec,
    build,
    build_stores,
    load_detections,
    random_master,
    save_detections,
    save_weights,
    synthetic_image,
    zippypoint_spec,
)

TINY = dict(channels=(8, 12, 16, 24), descriptor_dim=32, k=12)


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Workspace with tiny weights, a test image, and datasets."""
    d = tmp_path_factory.mktemp("cli")
    spec = NetworkSpec(**TINY)
    g = build(spec)
    fp, q = build_stores(g, random_master(g, seed=0), synthetic_image(120, 160, seed=3))
    save_weights(fp, str(d / "fp.zpwt"))
    save_weights(q, str(d / "q.zpwt"))
    (d / "spec.json").write_text(json.dumps(spec.as_dict()))
    write_pnm(str(d / "img.ppm"), synthetic_image(120, 160, seed=1))

    cfg = AugmentationConfig(dims=(160, 120), seed=5)
    make_synthetic_dataset(str(d / "data"), n_sequences=2, pairs_per_sequence=2,
                           dims=(160, 120), seed=5, cfg=cfg)

    ident = d / "ident" / "seq"
    ident.mkdir(parents=True)
    img = synthetic_image(120, 160, seed=9)
    write_pnm(str(ident / "1.ppm"), img)
    write_pnm(str(ident / "2.ppm"), img)
    (ident / "H_1_2").write_text("1 0 0\n0 1 0\n0 0 1\n")
    return d


def extract(ws, out, *extra):
    return main(["extract", "--weights", str(ws / "q.zpwt"),
                 "--spec", str(ws / "spec.json"),
                 "--image", str(ws / "img.ppm"), "--out", str(out), *extra])


class TestHelp:
    def test_top_level_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["--help"])
        assert e.value.code == 0
        out = capsys.readouterr().out
        for name in ("extract", "match", "eval", "bench", "bench-match", "search"):
            assert name in out

    @pytest.mark.parametrize("cmd,flags", [
        ("extract", ("--weights", "--image", "--out", "--max-kp", "--soft", "--binary", "--k")),
        ("match", ("--query", "--ref", "--max-dist", "--out")),
        ("eval", ("--dataset-dir", "--weights", "--report")),
        ("bench", ("--weights", "--image-size", "--reps")),
        ("bench-match", ("--n", "--m", "--reps")),
        ("search", ("--space-config", "--evaluator", "--trace-out")),
    ])
    def test_subcommand_help_covers_flags(self, capsys, cmd, flags):
        with pytest.raises(SystemExit) as e:
            main([cmd, "--help"])
        assert e.value.code == 0
        out = capsys.readouterr().out
        for flag in flags:
            assert flag in out

    def test_unknown_flag_exits_4(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["extract", "--bogus"])
        assert e.value.code == 4


class TestExtract:
    def test_round_trip(self, ws, tmp_path, capsys):
        out = tmp_path / "det.zpdt"
        assert extract(ws, out) == 0
        det = load_detections(str(out))
        assert len(det) > 0
        assert det.m == TINY["descriptor_dim"]
        text = capsys.readouterr().out
        assert "keypoints:" in text and "ms" in text

    def test_binary_popcounts_equal_k(self, ws, tmp_path):
        out = tmp_path / "det.zpdt"
        assert extract(ws, out, "--k", "12", "--binary") == 0
        det = load_detections(str(out))
        pops = np.bitwise_count(det.bits.words).sum(axis=1)
        assert np.all(pops == 12)

    def test_soft_mode(self, ws, tmp_path):
        out = tmp_path / "soft.zpdt"
        assert extract(ws, out, "--soft") == 0
        det = load_detections(str(out))
        assert det.bits is None and det.descriptors is not None

    def test_byte_identical_across_runs(self, ws, tmp_path):
        a, b = tmp_path / "a.zpdt", tmp_path / "b.zpdt"
        assert extract(ws, a) == 0
        assert extract(ws, b) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_missing_weights_exits_2_naming_path(self, ws, tmp_path, capsys):
        rc = main(["extract", "--weights", str(ws / "absent.zpwt"),
                   "--image", str(ws / "img.ppm"), "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "absent.zpwt" in capsys.readouterr().err

    def test_corrupt_weights_exits_3(self, ws, tmp_path):
        bad = tmp_path / "bad.zpwt"
        bad.write_bytes(b"not a weight store at all")
        rc = main(["extract", "--weights", str(bad), "--spec", str(ws / "spec.json"),
                   "--image", str(ws / "img.ppm"), "--out", str(tmp_path / "o")])
        assert rc == 3

    def test_garbage_image_exits_3(self, ws, tmp_path):
        img = tmp_path / "junk.ppm"
        img.write_bytes(b"\x00\x01\x02")
        rc = main(["extract", "--weights", str(ws / "q.zpwt"), "--spec", str(ws / "spec.json"),
                   "--image", str(img), "--out", str(tmp_path / "o")])
        assert rc == 3

    def test_fp_path_needs_fp_store(self, ws, tmp_path):
        out = tmp_path / "fp.zpdt"
        rc = main(["extract", "--weights", str(ws / "fp.zpwt"), "--spec", str(ws / "spec.json"),
                   "--image", str(ws / "img.ppm"), "--out", str(out), "--fp"])
        assert rc == 0
        assert len(load_detections(str(out))) > 0


class TestMatch:
    def detfile(self, ws, tmp_path):
        out = tmp_path / "det.zpdt"
        assert extract(ws, out) == 0
        return out

    def test_self_match_is_identity(self, ws, tmp_path, capsys):
        det = self.detfile(ws, tmp_path)
        out = tmp_path / "pairs.json"
        rc = main(["match", "--query", str(det), "--ref", str(det), "--out", str(out)])
        assert rc == 0
        data = json.loads(out.read_text())
        assert data["policy"] == "mutual_nn"
        assert all(i == j and dd == 0 for i, j, dd in data["pairs"])
        assert "pairs:" in capsys.readouterr().out

    def test_thread_count_does_not_change_output(self, ws, tmp_path):
        det = self.detfile(ws, tmp_path)
        a, b = tmp_path / "t1.json", tmp_path / "t8.json"
        assert main(["match", "--query", str(det), "--ref", str(det),
                     "--out", str(a), "--threads", "1"]) == 0
        assert main(["match", "--query", str(det), "--ref", str(det),
                     "--out", str(b), "--threads", "8"]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_descriptor_width_mismatch_exits_3(self, ws, tmp_path):
        det = self.detfile(ws, tmp_path)
        rng = np.random.default_rng(0)
        other = Detection(
            keypoints=np.array([[8.0, 8.0]], dtype=np.float32),
            scores=np.array([0.5], dtype=np.float32),
            m=64, k=20, mode="binary", image_size=(160, 120),
            bits=DescriptorSet.from_bits(rng.integers(0, 2, size=(1, 64)).astype(np.uint8)),
        )
        path = tmp_path / "wide.zpdt"
        save_detections(other, str(path))
        assert main(["match", "--query", str(det), "--ref", str(path)]) == 3

    def test_soft_file_rejected(self, ws, tmp_path):
        soft = tmp_path / "soft.zpdt"
        assert extract(ws, soft, "--soft") == 0
        det = self.detfile(ws, tmp_path)
        assert main(["match", "--query", str(soft), "--ref", str(det)]) == 3


class TestEval:
    def run_eval(self, ws, report, dataset="data", *extra):
        return main(["eval", "--dataset-dir", str(ws / dataset),
                     "--weights", str(ws / "q.zpwt"), "--spec", str(ws / "spec.json"),
                     "--report", str(report), *extra])

    def test_synthetic_dataset_metrics_finite(self, ws, tmp_path, capsys):
        report = tmp_path / "report.json"
        assert self.run_eval(ws, report) == 0
        data = json.loads(report.read_text())
        assert set(data["sequences"]) == {"synth_1", "synth_2"}
        agg = data["aggregate"]
        assert 0.0 <= agg["repeatability"] <= 1.0
        assert agg["n_pairs"] == 4
        assert "aggregate" in capsys.readouterr().out

    def test_report_deterministic(self, ws, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert self.run_eval(ws, a) == 0
        assert self.run_eval(ws, b) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_identity_pair_fp_reference_hits_perfect_repeatability(self, ws, tmp_path):
        report = tmp_path / "ident.json"
        rc = main(["eval", "--dataset-dir", str(ws / "ident"),
                   "--weights", str(ws / "fp.zpwt"), "--spec", str(ws / "spec.json"),
                   "--fp", "--report", str(report)])
        assert rc == 0
        seq = json.loads(report.read_text())["sequences"]["seq"]
        assert seq["repeatability"] == 1.0
        assert seq["localization_error"] == 0.0
        assert seq["cor5"] == 1.0

    def test_missing_dir_exits_2(self, ws, tmp_path):
        assert self.run_eval(ws, tmp_path / "r.json", "nowhere") == 2

    def test_empty_dir_exits_2(self, ws, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        rc = main(["eval", "--dataset-dir", str(empty), "--weights", str(ws / "q.zpwt"),
                   "--spec", str(ws / "spec.json")])
        assert rc == 2

    def test_all_sequences_malformed_exits_nonzero(self, ws, tmp_path, capsys):
        broken = tmp_path / "broken" / "seq_a"
        broken.mkdir(parents=True)
        (broken / "H_1_2").write_text("1 0 0\n")  # no images at all
        rc = main(["eval", "--dataset-dir", str(tmp_path / "broken"),
                   "--weights", str(ws / "q.zpwt"), "--spec", str(ws / "spec.json")])
        assert rc == 3
        assert "FAILED" in capsys.readouterr().out

    def test_malformed_sequence_listed_but_rest_evaluated(self, ws, tmp_path):
        root = tmp_path / "mixed"
        good_src = ws / "ident" / "seq"
        good = root / "good"
        good.mkdir(parents=True)
        for name in os.listdir(good_src):
            (good / name).write_bytes((good_src / name).read_bytes())
        bad = root / "bad"
        bad.mkdir()
        report = tmp_path / "mixed.json"
        rc = main(["eval", "--dataset-dir", str(root), "--weights", str(ws / "q.zpwt"),
                   "--spec", str(ws / "spec.json"), "--report", str(report)])
        assert rc == 0
        data = json.loads(report.read_text())
        assert "good" in data["sequences"]
        assert "bad" in data["failed"]


class TestBench:
    def test_report_structure(self, ws, tmp_path, capsys):
        out = tmp_path / "bench.json"
        rc = main(["bench", "--spec", str(ws / "spec.json"), "--image-size", "64x48",
                   "--reps", "1", "--json", str(out)])
        assert rc == 0
        data = json.loads(out.read_text())
        assert set(data["routes"]) == {"quantized", "fp"}
        for route in data["routes"].values():
            assert route["ms"] > 0 and route["fps"] > 0
        assert isinstance(data["quantized_faster"], bool)
        assert data["macs"] > 0
        assert "fps" in capsys.readouterr().out

    def test_reported_work_scales_with_pixels(self, ws, tmp_path):
        small, large = tmp_path / "s.json", tmp_path / "l.json"
        for size, path in (("64x48", small), ("128x96", large)):
            assert main(["bench", "--spec", str(ws / "spec.json"), "--image-size", size,
                         "--reps", "1", "--json", str(path)]) == 0
        s = json.loads(small.read_text())
        l = json.loads(large.read_text())
        assert l["pixels"] == 4 * s["pixels"]
        assert l["macs"] == 4 * s["macs"]

    def test_with_weights_single_route(self, ws, tmp_path):
        out = tmp_path / "one.json"
        rc = main(["bench", "--weights", str(ws / "q.zpwt"), "--spec", str(ws / "spec.json"),
                   "--image-size", "64x48", "--reps", "1", "--json", str(out)])
        assert rc == 0
        data = json.loads(out.read_text())
        assert set(data["routes"]) == {"quantized"}
        assert "quantized_faster" not in data

    def test_bad_image_size_exits_4(self, ws):
        assert main(["bench", "--spec", str(ws / "spec.json"), "--image-size", "tiny"]) == 4


class TestBenchMatch:
    def test_single_rep_report(self, tmp_path, capsys):
        out = tmp_path / "bm.json"
        rc = main(["bench-match", "--n", "64", "--m", "256", "--reps", "1",
                   "--json", str(out)])
        assert rc == 0
        data = json.loads(out.read_text())
        assert data["n_query"] == 64 and data["m"] == 256 and data["reps"] == 1
        assert set(data["seconds"]) == {"word", "bitloop"}
        assert all(v > 0 for v in data["pairs_per_second"].values())
        assert "speedup:" in capsys.readouterr().out

    def test_bad_width_exits_4(self):
        assert main(["bench-match", "--m", "100"]) == 4


class TestSearch:
    def test_replay_reproduces_shipped_configuration(self, tmp_path, capsys):
        out = tmp_path / "trace.json"
        rc = main(["search", "--trace-out", str(out)])
        assert rc == 0
        trace = json.loads(out.read_text())
        assert trace["final"] == zippypoint_spec().as_dict()
        assert trace["n_evaluations"] == 14
        assert "evaluations: 14" in capsys.readouterr().out

    def test_trace_deterministic(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert main(["search", "--trace-out", str(a)]) == 0
        assert main(["search", "--trace-out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_latency_evaluator_over_space_file(self, ws, tmp_path):
        space = tmp_path / "space.txt"
        space.write_text("descriptor_head: fp int8\n")
        out = tmp_path / "lat.json"
        rc = main(["search", "--space-config", str(space), "--evaluator", "latency",
                   "--base", str(ws / "spec.json"), "--image-size", "64x48",
                   "--reps", "1", "--trace-out", str(out)])
        assert rc == 0
        trace = json.loads(out.read_text())
        assert trace["n_evaluations"] == 2
        evals = trace["blocks"][0]["evaluations"]
        assert all(e["latency"] > 0 for e in evals)

    def test_malformed_space_file_exits_4_with_line(self, tmp_path, capsys):
        space = tmp_path / "bad.txt"
        space.write_text("first_conv: fp int8\nnot_a_block: fp\n")
        rc = main(["search", "--space-config", str(space), "--trace-out", str(tmp_path / "t")])
        assert rc == 4
        assert "line 2" in capsys.readouterr().err


class TestConsoleEntry:
    def test_module_invocation_round_trip(self, ws, tmp_path):
        out = tmp_path / "det.zpdt"
        r = subprocess.run(
            [sys.executable, "-m", "zippypoint.cli", "extract",
             "--weights", str(ws / "q.zpwt"), "--spec", str(ws / "spec.json"),
             "--image", str(ws / "img.ppm"), "--out", str(out)],
            capture_output=True, text=True,
        )
        assert r.returncode == 0, r.stderr
        assert "keypoints:" in r.stdout
        assert len(load_detections(str(out))) > 0

    def test_exit_code_crosses_process_boundary(self, ws):
        r = subprocess.run(
            [sys.executable, "-m", "zippypoint.cli", "extract",
             "--weights", "/does/not/exist", "--image", str(ws / "img.ppm"), "--out", "/tmp/x"],
            capture_output=True, text=True,
        )
        assert r.returncode == 2
        assert "/does/not/exist" in r.stderr

    def test_version_flag(self):
        r = subprocess.run([sys.executable, "-m", "zippypoint.cli", "--version"],
                           capture_output=True, text=True)
        assert r.returncode == 0
        assert r.stdout.startswith("zippy ")
