import json

import numpy as np
import pytest

from semverify.cli import EXIT_INPUT, EXIT_OK, main
from semverify.fixtures import make_benchmark, make_fixture
from semverify.modelio import read_results


@pytest.fixture
def fixture_dir(tmp_path):
    info = make_fixture("planted-sat-2d", seed=0, out_dir=tmp_path)
    return tmp_path, info


class TestBoundsCommand:
    def test_identity_fixture_bounds_file(self, tmp_path):
        info = make_fixture("identity-gen", seed=0, out_dir=tmp_path)
        out = tmp_path / "bounds.json"
        code = main([
            "bounds", "--model-dir", str(info.model_dir),
            "--property", str(info.property_path), "--out", str(out),
        ])
        assert code == EXIT_OK
        doc = json.loads(out.read_text())
        assert doc["bounds"]["lower"] == [-0.5, -0.5]
        assert doc["bounds"]["upper"] == [0.5, 0.5]
        assert all(doc["clamped"])

    def test_truncated_weights_exit_2(self, tmp_path):
        info = make_fixture("identity-gen", seed=0, out_dir=tmp_path)
        blob = info.model_dir / "generator.weights.bin"
        blob.write_bytes(blob.read_bytes()[:-4])
        code = main([
            "bounds", "--model-dir", str(info.model_dir),
            "--property", str(info.property_path),
        ])
        assert code == EXIT_INPUT

    def test_staged_bounds_equal_fused_run(self, fixture_dir):
        tmp_path, info = fixture_dir
        bounds_out = tmp_path / "b.json"
        main([
            "bounds", "--model-dir", str(info.model_dir),
            "--property", str(info.property_path), "--out", str(bounds_out),
        ])
        results_out = tmp_path / "r.jsonl"
        main([
            "verify", "--model-dir", str(info.model_dir),
            "--property", str(info.property_path), "--out", str(results_out),
        ])
        staged = json.loads(bounds_out.read_text())["bounds"]
        fused = read_results(results_out)[0].statistics["noise_bounds"]
        assert staged == fused


class TestVerifyCommand:
    def test_sat_fixture_writes_witnessed_record(self, fixture_dir):
        tmp_path, info = fixture_dir
        out = tmp_path / "run.results.jsonl"
        code = main([
            "verify", "--model-dir", str(info.model_dir),
            "--property", str(info.property_path), "--out", str(out),
        ])
        assert code == EXIT_OK
        recs = read_results(out)
        assert len(recs) == 1
        assert recs[0].verdict == "sat"
        assert recs[0].counterexample is not None
        assert recs[0].counterexample["realizability"] == "realizable"

    def test_unsat_fixture(self, tmp_path):
        info = make_fixture("robust-2d", seed=0, out_dir=tmp_path)
        out = tmp_path / "run.results.jsonl"
        code = main([
            "verify", "--model-dir", str(info.model_dir),
            "--property", str(info.property_path), "--out", str(out),
        ])
        assert code == EXIT_OK
        assert read_results(out)[0].verdict == "unsat"

    def test_missing_property_is_input_error(self, fixture_dir):
        tmp_path, info = fixture_dir
        code = main([
            "verify", "--model-dir", str(info.model_dir),
            "--property", str(tmp_path / "missing.json"),
        ])
        assert code == EXIT_INPUT

    def test_empty_benchmark_dir_exit_2(self, tmp_path):
        (tmp_path / "empty").mkdir()
        code = main(["verify", "--benchmark", str(tmp_path / "empty")])
        assert code == EXIT_INPUT


class TestAttackCommand:
    def test_attack_only_on_sat_fixture(self, fixture_dir):
        tmp_path, info = fixture_dir
        out = tmp_path / "attack.results.jsonl"
        code = main([
            "attack", "--model-dir", str(info.model_dir),
            "--property", str(info.property_path), "--out", str(out),
        ])
        assert code == EXIT_OK
        assert read_results(out)[0].verdict == "sat"

    def test_attack_only_on_robust_fixture_is_unknown(self, tmp_path):
        info = make_fixture("robust-2d", seed=0, out_dir=tmp_path)
        out = tmp_path / "attack.results.jsonl"
        main([
            "attack", "--model-dir", str(info.model_dir),
            "--property", str(info.property_path), "--out", str(out),
        ])
        assert read_results(out)[0].verdict == "unknown"


class TestBenchCommand:
    def test_small_benchmark_counts_conserved(self, tmp_path, capsys):
        bench = make_benchmark(tmp_path / "bench", seed=0, images=1, rhos=(0.04, 1.0))
        out = tmp_path / "bench.results.jsonl"
        code = main([
            "bench", "--benchmark", str(bench), "--out", str(out), "--workers", "2",
        ])
        assert code == EXIT_OK
        recs = read_results(out)
        assert len(recs) == 20
        total = sum(r.verdict in ("sat", "sat_unrealized", "unsat", "timeout")
                    for r in recs)
        assert total == 20
        table = capsys.readouterr().out
        assert "sat/unsat/timeout" in table
        assert (tmp_path / "bench.summary.csv").exists()
        assert (tmp_path / "figures" / "verdict_counts.png").exists()
        assert (tmp_path / "figures" / "runtime_hist.png").exists()

    def test_rerun_reproduces_counts(self, tmp_path):
        bench = make_benchmark(tmp_path / "bench", seed=0, images=1, rhos=(0.25,))
        outs = []
        for k in range(2):
            out = tmp_path / f"r{k}.jsonl"
            main(["bench", "--benchmark", str(bench), "--out", str(out)])
            outs.append([r.verdict for r in read_results(out)])
        assert outs[0] == outs[1]


class TestReportCommand:
    def test_report_from_results(self, tmp_path, capsys):
        bench = make_benchmark(tmp_path / "bench", seed=0, images=1, rhos=(0.25,))
        out = tmp_path / "run.jsonl"
        main(["bench", "--benchmark", str(bench), "--out", str(out)])
        capsys.readouterr()
        rep_dir = tmp_path / "rep"
        code = main(["report", str(out), "--out", str(rep_dir)])
        assert code == EXIT_OK
        assert (rep_dir / "summary.csv").exists()
        assert (rep_dir / "figures" / "verdict_counts.png").exists()
        table = capsys.readouterr().out
        assert "rho=0.25" in table


class TestVnnlibEmission:
    def test_emit_vnnlib_round_trips(self, tmp_path):
        from semverify.modelio import parse_exchange_property

        info = make_fixture("identity-gen", seed=0, out_dir=tmp_path)
        code = main([
            "verify", "--model-dir", str(info.model_dir),
            "--property", str(info.property_path),
            "--out", str(tmp_path / "r.jsonl"), "--emit-vnnlib",
        ])
        assert code == EXIT_OK
        vnn = tmp_path / "identity-gen.vnnlib.txt"
        assert vnn.exists()
        parsed = parse_exchange_property(vnn.read_text())
        # 1 + 2*|Z| input variables; n slice is the clipped identity range
        assert parsed.input_box.dim == 5
        assert parsed.true_label == 0
        np.testing.assert_array_equal(parsed.input_box.lower[1:3], [-0.5, -0.5])
        np.testing.assert_array_equal(parsed.input_box.upper[1:3], [0.5, 0.5])


class TestWorkerDeterminism:
    def test_verdicts_identical_across_worker_counts(self, tmp_path):
        bench = make_benchmark(tmp_path / "bench", seed=0, images=1, rhos=(0.25, 1.0))
        verdicts = {}
        for workers in (1, 4):
            out = tmp_path / f"w{workers}.jsonl"
            main(["bench", "--benchmark", str(bench), "--out", str(out),
                  "--workers", str(workers)])
            verdicts[workers] = [(r.property_id, r.verdict) for r in read_results(out)]
        assert verdicts[1] == verdicts[4]


class TestTimeoutMonotonicity:
    def test_doubled_timeout_never_decreases_unsat(self, tmp_path):
        bench = make_benchmark(tmp_path / "bench", seed=0, images=1, rhos=(0.25,))
        counts = {}
        for tag, timeout in (("short", 5.0), ("long", 10.0)):
            out = tmp_path / f"{tag}.jsonl"
            main(["bench", "--benchmark", str(bench), "--out", str(out),
                  "--timeout-s", str(timeout)])
            counts[tag] = sum(r.verdict == "unsat" for r in read_results(out))
        assert counts["long"] >= counts["short"]
