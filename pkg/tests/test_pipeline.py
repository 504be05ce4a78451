"""End-to-end pipeline behavior on generated fixtures."""

import json
from types import SimpleNamespace

import numpy as np
import pytest

from safemerge.adapter_io import (
    ADAPTER_METADATA_NAME,
    ADAPTER_WEIGHTS_NAME,
    CheckpointSource,
    load_adapter,
    write_adapter,
)
from safemerge.errors import MissingKeyError, PolicyError
from safemerge.fixtures import FixtureSpec, generate_fixture
from safemerge.merging import DARE_LINEAR, LINEAR, MergePolicy
from safemerge.pipeline import (
    EvalScores,
    LayerScorer,
    SweepGrid,
    run_analyze,
    run_resta,
    run_safelora,
    run_safemerge,
    safety_score,
    sweep,
    write_report_json,
)
from safemerge.subspace import ZERO_SUBSPACE

from .oracles import dense_apply


def world(tmp_path, seed=0, layers=4, d=16, rank=2, shards=1, **plant):
    spec = FixtureSpec(
        num_layers=layers, d_out=d, d_in=d, rank=rank, seed=seed, shards=shards, **plant
    )
    root = tmp_path / f"fx_{seed}_{shards}_{sum(plant.values())}"
    manifest = generate_fixture(spec, root)
    return SimpleNamespace(
        root=root,
        manifest=manifest,
        fine_tuned=load_adapter(root / "fine_tuned"),
        safe=load_adapter(root / "safe"),
        harmful=load_adapter(root / "harmful"),
        aligned=CheckpointSource.open(root / "aligned"),
        unaligned=CheckpointSource.open(root / "unaligned"),
    )


def adapters_byte_identical(dir_a, dir_b) -> bool:
    return all(
        (dir_a / name).read_bytes() == (dir_b / name).read_bytes()
        for name in (ADAPTER_WEIGHTS_NAME, ADAPTER_METADATA_NAME)
    )


class TestSafemergeEndpoints:
    def test_tau_zero_is_identity(self, tmp_path):
        w = world(tmp_path, seed=1)
        policy = MergePolicy(tau=0.0)
        bundle, report = run_safemerge(w.fine_tuned, w.safe, w.aligned, w.unaligned, policy)
        assert report.merged_count == 0
        write_adapter(bundle, tmp_path / "out")
        assert adapters_byte_identical(w.root / "fine_tuned", tmp_path / "out")

    def test_tau_one_merges_everything_linear(self, tmp_path):
        w = world(tmp_path, seed=2, layers=8, d=64, rank=8)
        policy = MergePolicy(strategy=LINEAR, w_f=0.8, w_s=0.2, tau=1.0)
        bundle, report = run_safemerge(w.fine_tuned, w.safe, w.aligned, w.unaligned, policy)
        assert report.merged_count == report.total_count == 16
        for key, layer in bundle.layers.items():
            expected = (
                0.8 * w.fine_tuned.layers[key].delta().data.astype(np.float64)
                + 0.2 * w.safe.layers[key].delta().data.astype(np.float64)
            )
            np.testing.assert_allclose(layer.delta().data, expected, rtol=1e-5, atol=1e-6)

    def test_zero_delta_layers_never_merge(self, tmp_path):
        w = world(tmp_path, seed=3, layers=2, zero=4)
        for tau in (0.2, 0.7, 1.0):
            _, report = run_safemerge(
                w.fine_tuned, w.safe, w.aligned, w.unaligned, MergePolicy(tau=tau)
            )
            assert report.merged_count == 0
            assert all(d.rho == 1.0 for d in report.decisions)


class TestSelectivity:
    def test_exactly_planted_layers_merge(self, tmp_path):
        # 3 orthogonal-planted (rho 0) among 5 zero-delta (rho 1): for any
        # tau in (0, 1] exactly the planted trio merges
        w = world(tmp_path, seed=4, layers=4, orthogonal=3, zero=5)
        planted = {k for k, v in w.manifest["layers"].items() if v["planting"] == "orthogonal"}
        for tau in (0.05, 0.5, 1.0):
            bundle, report = run_safemerge(
                w.fine_tuned, w.safe, w.aligned, w.unaligned, MergePolicy(tau=tau)
            )
            merged = {d.key for d in report.decisions if d.merged}
            assert merged == planted
            for d in report.decisions:
                if not d.merged:
                    out = bundle.layers[d.key]
                    src = w.fine_tuned.layers[d.key]
                    np.testing.assert_array_equal(out.a.data, src.a.data)
                    np.testing.assert_array_equal(out.b.data, src.b.data)

    def test_untouched_layers_byte_identical_through_files(self, tmp_path):
        w = world(tmp_path, seed=5, layers=4, orthogonal=2, zero=6)
        bundle, _ = run_safemerge(
            w.fine_tuned, w.safe, w.aligned, w.unaligned, MergePolicy(tau=0.5)
        )
        write_adapter(bundle, tmp_path / "sel_out")
        reloaded = load_adapter(tmp_path / "sel_out")
        for key, layer in w.fine_tuned.layers.items():
            if not key in {d.key for d in _.decisions if d.merged}:
                np.testing.assert_array_equal(reloaded.layers[key].a.data, layer.a.data)
                np.testing.assert_array_equal(reloaded.layers[key].b.data, layer.b.data)

    def test_missing_safe_layer_copied_and_flagged(self, tmp_path):
        w = world(tmp_path, seed=6, layers=2, orthogonal=4)
        dropped = w.safe.keys()[0]
        safe_layers = dict(w.safe.layers)
        del safe_layers[dropped]
        safe = type(w.safe)(safe_layers, w.safe.target_modules)
        bundle, report = run_safemerge(
            w.fine_tuned, safe, w.aligned, w.unaligned, MergePolicy(tau=1.0)
        )
        decision = next(d for d in report.decisions if d.key == dropped)
        assert not decision.merged
        assert "missing-safe-layer" in decision.note
        np.testing.assert_array_equal(
            bundle.layers[dropped].b.data, w.fine_tuned.layers[dropped].b.data
        )


class TestMonotonicityAndDeterminism:
    def test_merged_count_non_decreasing_in_tau(self, tmp_path):
        taus = [round(0.1 * i, 1) for i in range(11)]
        for seed in (10, 11, 12):
            w = world(tmp_path, seed=seed)
            counts = []
            scorer = LayerScorer(w.aligned, w.unaligned)
            for tau in taus:
                _, report = run_safemerge(
                    w.fine_tuned, w.safe, w.aligned, w.unaligned,
                    MergePolicy(tau=tau), scorer=scorer,
                )
                counts.append(report.merged_count)
            assert counts == sorted(counts)
            assert counts[0] == 0

    def test_worker_count_does_not_change_output(self, tmp_path):
        w = world(tmp_path, seed=13, layers=6)
        policy = MergePolicy(strategy=DARE_LINEAR, density=0.5, seed=42, tau=1.0, rank_mode="restore")
        out_dirs = []
        for workers in (1, 8):
            bundle, _ = run_safemerge(
                w.fine_tuned, w.safe, w.aligned, w.unaligned, policy, workers=workers
            )
            out = tmp_path / f"workers{workers}"
            write_adapter(bundle, out)
            out_dirs.append(out)
        assert adapters_byte_identical(*out_dirs)

    def test_repeat_run_bit_identical(self, tmp_path):
        w = world(tmp_path, seed=14)
        policy = MergePolicy(strategy=DARE_LINEAR, density=0.3, seed=7, tau=0.9, rank_mode="dense")
        b1, r1 = run_safemerge(w.fine_tuned, w.safe, w.aligned, w.unaligned, policy)
        b2, r2 = run_safemerge(w.fine_tuned, w.safe, w.aligned, w.unaligned, policy)
        assert b1.digest() == b2.digest()
        assert r1.to_json_dict() == r2.to_json_dict()


class TestReports:
    def test_report_complete_and_ordered(self, tmp_path):
        w = world(tmp_path, seed=15)
        _, report = run_safemerge(
            w.fine_tuned, w.safe, w.aligned, w.unaligned, MergePolicy(tau=0.5)
        )
        assert [d.key for d in report.decisions] == w.fine_tuned.keys()
        assert report.total_count == len(w.fine_tuned.layers)
        assert report.merged_count == sum(d.merged for d in report.decisions)
        assert set(report.input_digests) == {"fine_tuned", "safe", "aligned", "unaligned"}

    def test_report_json_round_trip_bit_exact(self, tmp_path):
        w = world(tmp_path, seed=16)
        _, report = run_safemerge(
            w.fine_tuned, w.safe, w.aligned, w.unaligned, MergePolicy(tau=0.5)
        )
        path = write_report_json(report, tmp_path / "report.json")
        loaded = json.loads(path.read_text())
        assert (json.dumps(loaded, indent=2) + "\n").encode() == path.read_bytes()
        assert loaded["total_count"] == report.total_count

    def test_sharded_and_single_file_reports_agree(self, tmp_path):
        w1 = world(tmp_path, seed=17, shards=1)
        w2 = world(tmp_path, seed=17, shards=3)
        r1 = run_analyze(w1.fine_tuned, w1.aligned, w1.unaligned)
        r2 = run_analyze(w2.fine_tuned, w2.aligned, w2.unaligned)
        d1 = [d.to_json_dict() for d in r1.decisions]
        d2 = [d.to_json_dict() for d in r2.decisions]
        assert d1 == d2  # identical scores; only provenance digests may differ


class TestSafelora:
    def test_tau_zero_identity(self, tmp_path):
        w = world(tmp_path, seed=18)
        bundle, report = run_safelora(w.fine_tuned, w.aligned, w.unaligned, tau=0.0)
        assert report.merged_count == 0
        write_adapter(bundle, tmp_path / "proj_out")
        assert adapters_byte_identical(w.root / "fine_tuned", tmp_path / "proj_out")

    def test_tau_one_projects_all_against_dense_oracle(self, tmp_path):
        w = world(tmp_path, seed=19, layers=3, d=12)
        bundle, report = run_safelora(w.fine_tuned, w.aligned, w.unaligned, tau=1.0)
        assert report.merged_count == report.total_count == 6
        for key, layer in bundle.layers.items():
            w_a = w.aligned.load(key)
            w_u = w.unaligned.load(key)
            v = w_a.data.astype(np.float64) - w_u.data.astype(np.float64)
            expected = dense_apply(v, w.fine_tuned.layers[key].delta().data)
            np.testing.assert_allclose(layer.delta().data, expected, rtol=1e-5, atol=1e-6)

    def test_projection_counts_monotone_in_tau(self, tmp_path):
        w = world(tmp_path, seed=20, layers=5)
        counts = []
        for tau in [round(0.1 * i, 1) for i in range(1, 11)]:
            _, report = run_safelora(w.fine_tuned, w.aligned, w.unaligned, tau=tau)
            counts.append(report.merged_count)
        assert counts == sorted(counts)

    def test_zero_subspace_layers_left_untouched(self, tmp_path):
        w = world(tmp_path, seed=21, layers=2)
        bundle, report = run_safelora(w.fine_tuned, w.aligned, w.aligned, tau=1.0)
        assert report.merged_count == 0
        for d in report.decisions:
            assert d.degenerate_reason == ZERO_SUBSPACE
            assert "zero-subspace" in d.note
        assert bundle.digest() == w.fine_tuned.digest()

    def test_invalid_tau(self, tmp_path):
        w = world(tmp_path, seed=22, layers=1)
        with pytest.raises(PolicyError):
            run_safelora(w.fine_tuned, w.aligned, w.unaligned, tau=1.5)


class TestResta:
    def test_zero_alpha_rejected(self, tmp_path):
        w = world(tmp_path, seed=23, layers=1)
        with pytest.raises(PolicyError, match="identity"):
            run_resta(w.fine_tuned, w.harmful, alpha_resta=0.0)

    def test_cancellation_of_identical_adapters(self, tmp_path):
        w = world(tmp_path, seed=24, layers=2)
        bundle, report = run_resta(w.fine_tuned, w.fine_tuned, alpha_resta=1.0)
        for layer in bundle.layers.values():
            assert np.linalg.norm(layer.delta().data) < 1e-6
        assert all(d.delta_norm_after < 1e-6 for d in report.decisions)

    def test_against_dense_oracle(self, tmp_path):
        w = world(tmp_path, seed=25, layers=2)
        bundle, report = run_resta(w.fine_tuned, w.harmful, alpha_resta=0.5)
        assert report.merged_count == report.total_count
        for key, layer in bundle.layers.items():
            expected = w.fine_tuned.layers[key].delta().data.astype(
                np.float64
            ) - 0.5 * w.harmful.layers[key].delta().data.astype(np.float64)
            np.testing.assert_allclose(layer.delta().data, expected, rtol=1e-5, atol=1e-6)

    def test_key_mismatch_fatal_with_diff(self, tmp_path):
        w = world(tmp_path, seed=26, layers=2)
        harm_layers = dict(w.harmful.layers)
        dropped = next(iter(harm_layers))
        del harm_layers[dropped]
        harmful = type(w.harmful)(harm_layers, w.harmful.target_modules)
        with pytest.raises(MissingKeyError) as exc:
            run_resta(w.fine_tuned, harmful, alpha_resta=0.5)
        assert dropped in exc.value.keys

    def test_norms_recorded(self, tmp_path):
        w = world(tmp_path, seed=27, layers=1)
        _, report = run_resta(w.fine_tuned, w.harmful, alpha_resta=0.5)
        for d in report.decisions:
            assert d.delta_norm_before > 0
            assert d.delta_norm_after > 0


class TestSweep:
    def test_grid_endpoints(self, tmp_path):
        w = world(tmp_path, seed=28)
        rows, _ = sweep(
            w.fine_tuned, w.safe, w.aligned, w.unaligned, SweepGrid(taus=(0.0, 1.0))
        )
        assert rows[0]["merged_count"] == 0
        assert rows[1]["merged_count"] == rows[1]["total_count"]

    def test_counts_monotone_over_grid(self, tmp_path):
        w = world(tmp_path, seed=29, layers=6)
        taus = tuple(round(0.1 * i, 1) for i in range(1, 11))
        rows, _ = sweep(w.fine_tuned, w.safe, w.aligned, w.unaligned, SweepGrid(taus=taus))
        counts = [r["merged_count"] for r in rows]
        assert counts == sorted(counts)

    def test_scores_computed_once_for_twenty_grid_points(self, tmp_path):
        w = world(tmp_path, seed=30)
        grid = SweepGrid(
            taus=(0.1, 0.3, 0.5, 0.7, 0.9),
            weights=((0.8, 0.2), (0.5, 0.5)),
            strategies=(LINEAR, DARE_LINEAR),
        )
        rows, scorer = sweep(w.fine_tuned, w.safe, w.aligned, w.unaligned, grid)
        assert len(rows) == 20
        assert scorer.compute_count == len(w.fine_tuned.layers)

    def test_empty_grid_rejected(self):
        with pytest.raises(PolicyError):
            SweepGrid(taus=())


class TestSafetyScore:
    def test_reported_values(self):
        assert safety_score(EvalScores(7.50, 5.70)) == pytest.approx(93.40, abs=1e-12)
        assert safety_score(EvalScores(0.0, 0.0)) == 100.0
        assert safety_score(EvalScores(100.0, 100.0)) == 0.0

    def test_out_of_range_rejected(self):
        with pytest.raises(PolicyError):
            EvalScores(-0.1, 5.0)
        with pytest.raises(PolicyError):
            EvalScores(5.0, 100.5)


class TestAnalyze:
    def test_analyze_scores_without_output(self, tmp_path):
        w = world(tmp_path, seed=31, layers=4, orthogonal=3)
        report = run_analyze(w.fine_tuned, w.aligned, w.unaligned)
        assert report.mode == "analyze"
        zeros = [d for d in report.decisions if d.rho == 0.0]
        assert len(zeros) == 3
        assert not any(d.merged for d in report.decisions)

    def test_missing_weight_key_fatal(self, tmp_path):
        w = world(tmp_path, seed=32, layers=2)
        extra = w.fine_tuned.layers[w.fine_tuned.keys()[0]]
        renamed = type(extra)(
            "model.layers.9.self_attn.q_proj", extra.a, extra.b, extra.rank, extra.lora_alpha
        )
        bundle = type(w.fine_tuned)(
            {**w.fine_tuned.layers, renamed.key: renamed}, w.fine_tuned.target_modules
        )
        with pytest.raises(MissingKeyError, match="layers.9"):
            run_analyze(bundle, w.aligned, w.unaligned)
