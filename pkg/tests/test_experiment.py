import json
from dataclasses import replace

import numpy as np
import pytest

from activeseg.errors import InvalidArgumentError
from activeseg.experiment import (
    CASE_FIELDS,
    SUMMARY_FIELDS,
    ExperimentConfig,
    config_schema,
    csv_text,
    derive_rng,
    derive_seed,
    load_config,
    read_csv_rows,
    read_manifest,
    run,
    stream_key,
    summarize_case_rows,
)
from activeseg.learner import TrainConfig
from activeseg.sampling import BudgetRule, PoolState
from activeseg.volume import PhantomSpec, volumes_equal

SMALL = ExperimentConfig(
    phantom=PhantomSpec(dims=(24, 24, 16), organ_semi_axes=((4, 7), (4, 7), (2, 4)), lesion_radius=(1, 2),
                        intensity_jitter=20.0),
    n_pool=7, n_val=2, n_test=3, initial_volumes=2, iterations=2,
    budget=BudgetRule(volumes_per_iteration=2),
    train=TrainConfig(max_steps=40, val_interval=20),
    mc_samples=3, seed=5,
)


class TestStreams:
    def test_same_path_same_stream(self):
        a = derive_rng(1, "USS", 2, "dropout", 7).random(5)
        b = derive_rng(1, "USS", 2, "dropout", 7).random(5)
        np.testing.assert_array_equal(a, b)

    def test_paths_are_not_ambiguous(self):
        assert stream_key(1, "a", "bc") != stream_key(1, "ab", "c")
        assert stream_key(1, "1") != stream_key(1, 1)
        assert stream_key(1, "x") != stream_key(2, "x")
        assert stream_key(1) != stream_key(1, "")
        with pytest.raises(InvalidArgumentError):
            stream_key(1, 1.5)

    def test_seed_is_64_bit(self):
        seeds = {derive_seed(0, "phantom", "pool", i) for i in range(1000)}
        assert len(seeds) == 1000 and max(seeds) < 2**64

    def test_fast_key_path_matches_generator(self):
        bg = np.random.Philox(key=0)
        for i in range(50):
            key = stream_key(3, "arm", i)
            bg.state = _philox_state(bg, key)
            assert bg.random_raw() == derive_rng(3, "arm", i).bit_generator.random_raw()


def _philox_state(bg, key: int) -> dict:
    st = dict(bg.state)
    st["state"] = {"counter": np.zeros(4, np.uint64),
                   "key": np.array([key & (2**64 - 1), key >> 64], dtype=np.uint64)}
    st["buffer_pos"] = 4
    return st


class TestConfig:
    def test_schema_copy_in_docs_matches(self):
        from pathlib import Path

        docs = Path(__file__).resolve().parents[1] / "docs" / "config.schema.json"
        assert json.loads(docs.read_text()) == config_schema()

    def test_round_trip(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps(SMALL.to_dict()))
        assert load_config(p) == SMALL

    @pytest.mark.parametrize("doc", [
        {"iterations": -1},
        {"arms": ["XYZ"]},
        {"splits": {"pool": 0}},
        {"unknown": 1},
        {"train": {"max_step": 3}},
        {"budget": {"slice_budget": 0}},
    ])
    def test_schema_rejects(self, tmp_path, doc):
        p = tmp_path / "c.json"
        p.write_text(json.dumps(doc))
        with pytest.raises(InvalidArgumentError):
            load_config(p)

    def test_pool_must_cover_volume_iterations(self):
        with pytest.raises(InvalidArgumentError):
            replace(SMALL, n_pool=3).validate()
        replace(SMALL, n_pool=3, arms=("USS",)).validate()

    def test_bad_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{")
        with pytest.raises(InvalidArgumentError):
            load_config(p)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = replace(SMALL, keep_volumes=True)
    return run(cfg, out), out


class TestRun:
    def test_outputs_present(self, small_run):
        res, out = small_run
        for name in ("manifest.json", "cases.csv", "summary.csv", "steps.csv", "log.txt", "config.json"):
            assert (out / name).exists()
        assert not res.partial
        rows = read_csv_rows(out / "cases.csv")
        assert list(rows[0]) == CASE_FIELDS
        strategies = {r["strategy"] for r in rows}
        assert strategies == {"initial", "datapool", "UVS", "RVS", "USS", "RSS"}
        assert len(rows) == 3 * (2 + 4 * 2)

    def test_reports_resummarize(self, small_run):
        _, out = small_run
        rows = read_csv_rows(out / "cases.csv")
        text = csv_text(summarize_case_rows(rows), SUMMARY_FIELDS)
        assert text == (out / "summary.csv").read_text()

    def test_state_checkpoints_audit(self, small_run):
        res, out = small_run
        data = read_manifest(out / "manifest.json")
        refs = {c.id: c.label for c in data["pool"]}
        for rep in res.reports:
            if rep.strategy in ("UVS", "RVS", "USS", "RSS"):
                doc = json.loads((out / "states" / f"{rep.strategy}_{rep.iteration}.json").read_text())
                pool = PoolState.from_json(doc, refs)
                assert pool.ledger == rep.ledger == pool.audit()

    def test_ledgers_monotone_and_budgets(self, small_run):
        res, _ = small_run
        init = res.by_strategy("initial")[0].ledger
        uvs_added = []
        prev = init
        for rep in res.by_strategy("UVS"):
            uvs_added.append(rep.ledger.liver_slices - prev.liver_slices)
            prev = rep.ledger
        for arm in ("UVS", "RVS", "USS", "RSS"):
            prev = init
            for rep in res.by_strategy(arm):
                assert rep.ledger.slices >= prev.slices and rep.ledger.volumes >= prev.volumes
                if arm in ("UVS", "RVS"):
                    assert rep.ledger.volumes - prev.volumes == 2
                if arm == "USS":
                    assert rep.ledger.slices - prev.slices == rep.slice_budget or rep.exhausted
                if arm == "RSS":
                    assert rep.ledger.liver_slices - prev.liver_slices == rep.slice_budget or rep.exhausted
                prev = rep.ledger
        # the second iteration's budget follows the first UVS iteration
        assert res.by_strategy("USS")[1].slice_budget == max(1, int(np.floor(uvs_added[0] / 3 + 0.5)))

    def test_initial_shared(self, small_run):
        res, out = small_run
        initial = res.by_strategy("initial")[0]
        assert initial.ledger.volumes == 2 and initial.ledger.isolated_liver_slices == 0
        assert (out / "models" / "initial_0.json").exists()

    def test_rows_reproducible_from_persisted_volumes(self, small_run):
        from activeseg.metrics import evaluate_case
        from activeseg.volume import read_mhd

        _, out = small_run
        rows = read_csv_rows(out / "cases.csv")
        for r in rows[:6] + rows[-3:]:
            pred = read_mhd(out / "volumes" / f"{r['strategy']}_{r['iteration']}" / f"{r['case_id']}_pred.mha")
            ref = read_mhd(out / "data" / f"{r['case_id']}_label.mha")
            m = evaluate_case(pred, ref)
            assert repr(m.dice) == r["dice"]
            assert (repr(m.hd) if m.hd is not None else "") == r["hd_mm"]

    def test_deterministic_and_arm_independent(self, small_run, tmp_path):
        _, out = small_run
        res2 = run(replace(SMALL, arms=("RVS", "RSS"), data_pool_baseline=False), tmp_path)
        full = [r for r in read_csv_rows(out / "cases.csv") if r["strategy"] in ("initial", "RVS", "RSS")]
        part = read_csv_rows(tmp_path / "cases.csv")
        assert full == part
        assert res2.by_strategy("RSS")[0].slice_budget == small_run[0].by_strategy("RSS")[0].slice_budget

    def test_manifest_round_trip(self, small_run):
        _, out = small_run
        data = read_manifest(out / "manifest.json")
        assert [c.id for c in data["test"]] == ["test_000", "test_001", "test_002"]
        from activeseg.experiment import generate_dataset

        fresh = generate_dataset(SMALL)
        assert all(volumes_equal(a.image, b.image) for a, b in zip(fresh["pool"], data["pool"]))


def test_zero_iterations_only_baselines(tmp_path):
    res = run(replace(SMALL, iterations=0, train=TrainConfig(max_steps=10, val_interval=10)), tmp_path)
    assert {r.strategy for r in res.reports} == {"initial", "datapool"}
    assert res.by_strategy("datapool")[0].ledger.volumes == SMALL.n_pool
