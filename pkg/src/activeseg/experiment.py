"""Active-learning experiment: dataset generation, strategy arms and reports.

Every random draw flows through :func:`derive_rng` / :func:`derive_seed`,
keyed by a label path such as ``("USS", 2, "dropout", "pool_007")``, so an
arm's results do not depend on which other arms run or in which order.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .errors import ActiveSegError, InsufficientDataError, InvalidArgumentError
from .learner import (
    FeatureCache,
    FeatureConfig,
    MlpParams,
    TrainConfig,
    TrainLog,
    predict,
    save_checkpoint,
    threshold,
    train,
)
from .metrics import METRICS, MetricSet, evaluate_case, summarize_values, wilcoxon_signed_rank
from .sampling import (
    BudgetRule,
    Ledger,
    PoolState,
    VolumeSelection,
    annotate,
    compute_slice_budget,
    effort_units,
    select_rss,
    select_rvs,
    select_uss,
    select_uvs,
)
from .uncertainty import mc_sample, predictive_entropy, profile_with_peaks, volume_uncertainty
from .volume import LabelVolume, PhantomSpec, ScalarVolume, generate_phantom, write_mhd

log = logging.getLogger(__name__)

STRATEGIES = ("UVS", "RVS", "USS", "RSS")
VOLUME_STRATEGIES = ("UVS", "RVS")
SLICE_STRATEGIES = ("USS", "RSS")
INITIAL = "initial"
DATA_POOL = "datapool"
CONVERGED = "converged"


# ---------------------------------------------------------------------------
# random streams


def _encode_path(master_seed: int, labels) -> bytes:
    buf = [struct.pack("<Q", int(master_seed) & 0xFFFFFFFFFFFFFFFF)]
    for lab in labels:
        if isinstance(lab, (int, np.integer)) and not isinstance(lab, bool):
            payload = str(int(lab)).encode()
            tag = b"i"
        elif isinstance(lab, str):
            payload = lab.encode("utf-8")
            tag = b"s"
        else:
            raise InvalidArgumentError(f"stream labels must be str or int, got {lab!r}")
        buf.append(tag + struct.pack("<I", len(payload)) + payload)
    return b"".join(buf)


def _digest(master_seed: int, labels, size: int) -> bytes:
    return hashlib.blake2b(_encode_path(master_seed, labels), digest_size=size, person=b"activeseg-rng").digest()


def derive_seed(master_seed: int, *labels) -> int:
    """64-bit seed for the label path (for APIs that take an integer seed)."""
    return int.from_bytes(_digest(master_seed, labels, 8), "little")


def stream_key(master_seed: int, *labels) -> int:
    """128-bit Philox key for a label path.

    Labels are type-tagged and length-prefixed before hashing, so distinct
    paths never share an encoding.
    """
    return int.from_bytes(_digest(master_seed, labels, 16), "little")


def derive_rng(master_seed: int, *labels) -> np.random.Generator:
    """Counter-based Philox stream keyed by a BLAKE2b hash of (seed, labels)."""
    return np.random.Generator(np.random.Philox(key=stream_key(master_seed, *labels)))


# ---------------------------------------------------------------------------
# configuration


def _default_phantom() -> PhantomSpec:
    # site-to-site intensity offsets keep the task hard enough that more labels help
    return PhantomSpec(intensity_jitter=20.0)


def _default_converged_train() -> TrainConfig:
    return TrainConfig(max_steps=8000, early_stop_fraction=0.25)


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: PhantomSpec = field(default_factory=_default_phantom)
    n_pool: int = 32
    n_val: int = 4
    n_test: int = 12
    initial_volumes: int = 5
    iterations: int = 5
    arms: tuple[str, ...] = STRATEGIES
    data_pool_baseline: bool = True
    budget: BudgetRule = field(default_factory=BudgetRule)
    train: TrainConfig = field(default_factory=TrainConfig)
    converged_train: TrainConfig = field(default_factory=_default_converged_train)
    converged: bool = False
    mc_samples: int = 20
    seed: int = 0
    features: FeatureConfig = field(default_factory=FeatureConfig)
    keep_volumes: bool = False
    threads: int = 1

    def validate(self):
        self.phantom.validate()
        self.budget.validate()
        self.train.validate()
        self.converged_train.validate()
        self.features.validate()
        if min(self.n_pool, self.n_val, self.n_test) < 1:
            raise InvalidArgumentError("every split needs at least one volume")
        if not 1 <= self.initial_volumes <= self.n_pool:
            raise InvalidArgumentError("initial_volumes must lie in [1, n_pool]")
        if self.iterations < 0:
            raise InvalidArgumentError("iterations must be >= 0")
        bad = [a for a in self.arms if a not in STRATEGIES]
        if bad or len(set(self.arms)) != len(self.arms):
            raise InvalidArgumentError(f"arms must be distinct members of {STRATEGIES}, got {list(self.arms)}")
        if any(a in VOLUME_STRATEGIES for a in self.arms) and self.iterations:
            need = self.budget.volumes_per_iteration * self.iterations
            if self.n_pool < need:
                raise InvalidArgumentError(
                    f"pool of {self.n_pool} is smaller than {need} volumes needed by volume strategies"
                )
        if self.mc_samples < 1:
            raise InvalidArgumentError("mc_samples must be >= 1")
        if self.threads < 1:
            raise InvalidArgumentError("threads must be >= 1")

    def to_dict(self) -> dict:
        return {
            "phantom": self.phantom.to_dict(),
            "splits": {"pool": self.n_pool, "val": self.n_val, "test": self.n_test},
            "initial_volumes": self.initial_volumes,
            "iterations": self.iterations,
            "arms": list(self.arms),
            "data_pool_baseline": self.data_pool_baseline,
            "budget": {
                "volumes_per_iteration": self.budget.volumes_per_iteration,
                "slice_budget": self.budget.slice_budget,
                "liver_divisor": self.budget.liver_divisor,
                "granularity": self.budget.granularity,
            },
            "train": self.train.to_dict(),
            "converged_train": self.converged_train.to_dict(),
            "converged": self.converged,
            "mc_samples": self.mc_samples,
            "seed": self.seed,
            "features": self.features.to_dict(),
            "keep_volumes": self.keep_volumes,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        jsonschema.validate(doc, config_schema())
        kw = {}
        if "phantom" in doc:
            kw["phantom"] = PhantomSpec.from_dict(doc["phantom"])
        splits = doc.get("splits", {})
        for key, name in (("pool", "n_pool"), ("val", "n_val"), ("test", "n_test")):
            if key in splits:
                kw[name] = splits[key]
        for key in ("initial_volumes", "iterations", "data_pool_baseline", "converged", "mc_samples",
                    "seed", "keep_volumes"):
            if key in doc:
                kw[key] = doc[key]
        if "arms" in doc:
            kw["arms"] = tuple(a.upper() for a in doc["arms"])
        if "budget" in doc:
            kw["budget"] = BudgetRule(**doc["budget"])
        if "train" in doc:
            kw["train"] = TrainConfig.from_dict(doc["train"])
        if "converged_train" in doc:
            kw["converged_train"] = TrainConfig.from_dict(
                {"max_steps": 8000, "early_stop_fraction": 0.25, **doc["converged_train"]}
            )
        if "features" in doc:
            kw["features"] = FeatureConfig.from_dict(doc["features"])
        return cls(**kw)


def config_schema() -> dict:
    return json.loads(resources.files("activeseg").joinpath("config.schema.json").read_text())


def load_config(path) -> ExperimentConfig:
    """Load and validate an experiment config file (JSON)."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"config is not valid JSON: {exc}") from None
    try:
        cfg = ExperimentConfig.from_dict(doc)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InvalidArgumentError(f"config error at {where}: {exc.message}") from None
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# dataset


@dataclass(frozen=True, eq=False)
class Case:
    id: str
    split: str
    image: ScalarVolume
    label: LabelVolume


def generate_dataset(cfg: ExperimentConfig) -> dict[str, list[Case]]:
    out = {}
    for split, count in (("pool", cfg.n_pool), ("val", cfg.n_val), ("test", cfg.n_test)):
        cases = []
        for i in range(count):
            img, lab = generate_phantom(cfg.phantom, derive_seed(cfg.seed, "phantom", split, i))
            cases.append(Case(f"{split}_{i:03d}", split, img, lab))
        out[split] = cases
    return out


def write_dataset(data: dict[str, list[Case]], out_dir, seed: int, phantom: PhantomSpec) -> dict:
    """Write image/label MHD pairs and return the manifest document."""
    out_dir = Path(out_dir)
    data_dir = out_dir / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    volumes = []
    for split in ("pool", "val", "test"):
        for case in data.get(split, []):
            img_path = data_dir / f"{case.id}_image.mha"
            lab_path = data_dir / f"{case.id}_label.mha"
            write_mhd(img_path, case.image)
            write_mhd(lab_path, case.label)
            volumes.append({
                "id": case.id,
                "split": split,
                "image": str(img_path.relative_to(out_dir)),
                "label": str(lab_path.relative_to(out_dir)),
            })
    manifest = {"seed": seed, "phantom": phantom.to_dict(), "volumes": volumes}
    write_text_atomic(out_dir / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    return manifest


def read_manifest(path) -> dict[str, list[Case]]:
    from .volume import read_mhd

    path = Path(path)
    doc = json.loads(path.read_text())
    out = {"pool": [], "val": [], "test": []}
    for entry in doc["volumes"]:
        if entry["split"] not in out:
            raise InvalidArgumentError(f"unknown split {entry['split']!r} for {entry['id']}")
        img = read_mhd(path.parent / entry["image"], as_label=False)
        lab = read_mhd(path.parent / entry["label"], as_label=True)
        out[entry["split"]].append(Case(entry["id"], entry["split"], img, lab))
    return out


def write_text_atomic(path, text: str):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# reports


@dataclass
class IterationReport:
    strategy: str
    iteration: int | str
    ledger: Ledger
    train_log: TrainLog
    cases: list[tuple[str, MetricSet]]
    slice_budget: int | None = None
    effort: float | None = None
    exhausted: bool = False


CASE_FIELDS = ["case_id", "strategy", "iteration", "dice", "rve_pct", "msd_mm", "hd_mm", "undefined_flags"]
SUMMARY_FIELDS = ["strategy", "iteration", "metric", "mean", "sd", "p05_or_p95", "p_value_vs_best", "n", "excluded"]
STEP_FIELDS = ["strategy", "iteration", "best_step", "steps_run", "best_val_jaccard", "slices", "liver_slices",
               "volumes", "slice_budget", "effort_units", "exhausted"]


def _num(x) -> str:
    return "" if x is None else repr(float(x))


def case_rows(reports) -> list[dict]:
    rows = []
    for rep in reports:
        for case_id, m in rep.cases:
            rows.append({
                "case_id": case_id,
                "strategy": rep.strategy,
                "iteration": str(rep.iteration),
                "dice": _num(m.dice),
                "rve_pct": _num(m.rve),
                "msd_mm": _num(m.msd),
                "hd_mm": _num(m.hd),
                "undefined_flags": "|".join(m.undefined),
            })
    return rows


def step_rows(reports) -> list[dict]:
    rows = []
    for rep in reports:
        rows.append({
            "strategy": rep.strategy,
            "iteration": str(rep.iteration),
            "best_step": rep.train_log.best_step,
            "steps_run": rep.train_log.steps_run,
            "best_val_jaccard": _num(rep.train_log.best_jaccard),
            "slices": rep.ledger.slices,
            "liver_slices": rep.ledger.liver_slices,
            "volumes": rep.ledger.volumes,
            "slice_budget": "" if rep.slice_budget is None else rep.slice_budget,
            "effort_units": _num(rep.effort),
            "exhausted": int(rep.exhausted),
        })
    return rows


def _metric_key(name: str) -> str:
    return {"dice": "dice", "rve": "rve_pct", "msd": "msd_mm", "hd": "hd_mm"}[name]


def summarize_case_rows(rows) -> list[dict]:
    """Summary rows (one per strategy, iteration and metric) from per-case rows.

    Within each iteration the arms are compared against the best arm for
    that metric (highest mean DICE, lowest mean otherwise) with a paired
    Wilcoxon signed-rank test. Initial and data-pool models are not compared.
    """
    groups: dict[tuple[str, str], dict[str, dict[str, float | None]]] = {}
    order = []
    for r in rows:
        key = (r["strategy"], r["iteration"])
        if key not in groups:
            groups[key] = {m: {} for m in METRICS}
            order.append(key)
        for m in METRICS:
            raw = r[_metric_key(m)]
            groups[key][m][r["case_id"]] = None if raw == "" else float(raw)

    summaries = {}
    for key in order:
        for m in METRICS:
            values = [groups[key][m][c] for c in sorted(groups[key][m])]
            try:
                summaries[key, m] = summarize_values(values)
            except ActiveSegError:
                summaries[key, m] = None

    pvalues = {}
    iterations = sorted({it for _, it in order})
    for it in iterations:
        arms = [k for k in order if k[1] == it and k[0] in STRATEGIES]
        for m in METRICS:
            scored = [k for k in arms if summaries[k, m] is not None]
            if len(scored) < 2:
                continue
            sign = -1.0 if m == "dice" else 1.0
            best = min(scored, key=lambda k: (sign * summaries[k, m].mean, STRATEGIES.index(k[0])))
            for k in scored:
                if k == best:
                    continue
                common = sorted(c for c in groups[k][m] if groups[k][m][c] is not None
                                and groups[best][m].get(c) is not None)
                try:
                    res = wilcoxon_signed_rank([groups[k][m][c] for c in common],
                                               [groups[best][m][c] for c in common])
                    pvalues[k, m] = res.pvalue
                except InsufficientDataError:
                    pass

    out = []
    for key in order:
        for m in METRICS:
            s = summaries[key, m]
            robust = None if s is None else (s.p05 if m == "dice" else s.p95)
            n_total = len(groups[key][m])
            out.append({
                "strategy": key[0],
                "iteration": key[1],
                "metric": m,
                "mean": _num(None if s is None else s.mean),
                "sd": _num(None if s is None else s.sd),
                "p05_or_p95": _num(robust),
                "p_value_vs_best": _num(pvalues.get((key, m))),
                "n": 0 if s is None else s.n,
                "excluded": n_total if s is None else s.excluded,
            })
    return out


def csv_text(rows, fieldnames) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# the experiment


@dataclass
class ExperimentResult:
    reports: list[IterationReport]
    partial: dict[str, str]  # arm -> error message for aborted arms
    out_dir: Path | None = None

    def final(self, strategy: str) -> IterationReport | None:
        rows = [r for r in self.reports if r.strategy == strategy and isinstance(r.iteration, int)]
        return rows[-1] if rows else None

    def by_strategy(self, strategy: str) -> list[IterationReport]:
        return [r for r in self.reports if r.strategy == strategy]


class _Runner:
    def __init__(self, cfg: ExperimentConfig, out_dir: Path | None):
        self.cfg = cfg
        self.out = out_dir
        self.data = generate_dataset(cfg)
        self.images = {c.id: c.image for c in self.data["pool"]}
        self.refs = {c.id: c.label for c in self.data["pool"]}
        self.val = [(c.image, c.label) for c in self.data["val"]]
        self.test = self.data["test"]
        self.cache = FeatureCache(cfg.features)
        self.lines: list[str] = []

    # -- helpers ---------------------------------------------------------

    def note(self, text: str):
        self.lines.append(text)
        log.info(text)

    def fit(self, pool: PoolState, train_cfg: TrainConfig, *labels) -> tuple[MlpParams, TrainLog]:
        # one training stream per phase, shared by all arms: models differ only through their data
        items = [(self.images[vid], pool.partial_labels(vid)) for vid in pool.annotated_ids()]
        cfg = replace(train_cfg, seed=derive_seed(self.cfg.seed, "train", CONVERGED if CONVERGED in labels else "capped"))
        return train(items, self.val, cfg, self.cfg.features, self.cache)

    def evaluate(self, params: MlpParams, strategy: str, iteration) -> list[tuple[str, MetricSet]]:
        out = []
        for case in self.test:
            prob = predict(params, case.image, self.cfg.features, self.cache)
            pred = threshold(prob)
            out.append((case.id, evaluate_case(pred, case.label)))
            if self.cfg.keep_volumes and self.out is not None:
                vdir = self.out / "volumes" / f"{strategy}_{iteration}"
                vdir.mkdir(parents=True, exist_ok=True)
                write_mhd(vdir / f"{case.id}_pred.mha", pred)
                write_mhd(vdir / f"{case.id}_prob.mha", prob)
        return out

    def save_state(self, pool: PoolState, strategy: str, iteration):
        if self.out is None:
            return
        sdir = self.out / "states"
        sdir.mkdir(parents=True, exist_ok=True)
        doc = {"strategy": strategy, "iteration": iteration, **pool.to_json()}
        write_text_atomic(sdir / f"{strategy}_{iteration}.json", json.dumps(doc, indent=1) + "\n")

    def save_model(self, params: MlpParams, strategy: str, iteration):
        if self.out is None:
            return
        mdir = self.out / "models"
        mdir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(mdir / f"{strategy}_{iteration}.json", params, self.cfg.features)

    def entropy(self, params, vid, *labels):
        seed = derive_seed(self.cfg.seed, *labels, "dropout", vid)
        samples = mc_sample(params, self.images[vid], self.cfg.features, self.cfg.mc_samples, seed, self.cache)
        return predictive_entropy(samples)

    # -- phases ----------------------------------------------------------

    def initial(self):
        cfg = self.cfg
        ids = sorted(self.refs)
        rng = derive_rng(cfg.seed, "initial")
        chosen = sorted(ids[i] for i in rng.choice(len(ids), size=cfg.initial_volumes, replace=False))
        pool, _ = annotate(PoolState(self.refs), VolumeSelection(tuple(chosen)))
        params, tlog = self.fit(pool, cfg.train, INITIAL)
        self.pool0, self.model0 = pool, params
        self.save_state(pool, INITIAL, 0)
        self.save_model(params, INITIAL, 0)
        self.note(f"initial: volumes={','.join(chosen)} best_step={tlog.best_step} val_jaccard={tlog.best_jaccard!r}")
        return IterationReport(INITIAL, 0, pool.ledger, tlog, self.evaluate(params, INITIAL, 0))

    def data_pool(self) -> list[IterationReport]:
        pool, _ = annotate(PoolState(self.refs), VolumeSelection(tuple(sorted(self.refs))))
        out = []
        params, tlog = self.fit(pool, self.cfg.train, DATA_POOL)
        self.save_model(params, DATA_POOL, 0)
        out.append(IterationReport(DATA_POOL, 0, pool.ledger, tlog, self.evaluate(params, DATA_POOL, 0)))
        self.note(f"{DATA_POOL}: best_step={tlog.best_step} val_jaccard={tlog.best_jaccard!r}")
        if self.cfg.converged:
            params, tlog = self.fit(pool, self.cfg.converged_train, DATA_POOL, CONVERGED)
            self.save_model(params, DATA_POOL, CONVERGED)
            out.append(IterationReport(DATA_POOL, CONVERGED, pool.ledger, tlog,
                                       self.evaluate(params, DATA_POOL, CONVERGED)))
        return out

    def initial_liver_rate(self) -> float:
        """Liver slices per volume-strategy iteration implied by the initial set."""
        led = self.pool0.ledger
        return led.liver_slices / led.volumes * self.cfg.budget.volumes_per_iteration

    def slice_budget(self, iteration: int, uvs_liver: list[int]) -> int:
        b = self.cfg.budget
        if b.slice_budget is not None:
            return b.slice_budget
        history = uvs_liver[: iteration - 1] or [self.initial_liver_rate()]
        return compute_slice_budget(history, b.liver_divisor, b.granularity)

    def arm(self, name: str, uvs_liver: list[int] | None = None, emit: bool = True) -> tuple[list[IterationReport], str | None]:
        """Run one strategy arm; returns its reports and an error message if it aborted."""
        cfg = self.cfg
        pool, params = self.pool0, self.model0
        reports: list[IterationReport] = []
        try:
            for it in range(1, cfg.iterations + 1):
                before = pool.ledger
                n_slices = None
                exhausted = False
                if name == "UVS":
                    scores = {}
                    for vid in pool.eligible_ids():
                        ent = self.entropy(params, vid, name, it)
                        mask = threshold(predict(params, self.images[vid], cfg.features, self.cache))
                        scores[vid] = volume_uncertainty(ent, mask).value
                    sel = select_uvs(pool, scores, cfg.budget.volumes_per_iteration)
                elif name == "RVS":
                    sel = select_rvs(pool, derive_rng(cfg.seed, name, it, "select"), cfg.budget.volumes_per_iteration)
                elif name == "USS":
                    n_slices = self.slice_budget(it, uvs_liver or [])
                    profiles = {vid: profile_with_peaks(self.entropy(params, vid, name, it))
                                for vid in pool.eligible_ids()}
                    sel = select_uss(pool, profiles, n_slices)
                    exhausted = sel.exhausted
                else:
                    n_slices = self.slice_budget(it, uvs_liver or [])
                    sel = select_rss(pool, derive_rng(cfg.seed, name, it, "select"), n_slices)
                    exhausted = sel.exhausted
                pool, _ = annotate(pool, sel)
                delta = pool.ledger - before
                params, tlog = self.fit(pool, cfg.train, name, it)
                cases = self.evaluate(params, name, it) if emit else []
                if emit:
                    self.save_state(pool, name, it)
                    self.save_model(params, name, it)
                reports.append(IterationReport(name, it, pool.ledger, tlog, cases, n_slices,
                                               effort_units(delta), exhausted))
            if cfg.converged and emit and cfg.iterations:
                params, tlog = self.fit(pool, cfg.converged_train, name, CONVERGED)
                self.save_model(params, name, CONVERGED)
                reports.append(IterationReport(name, CONVERGED, pool.ledger, tlog,
                                               self.evaluate(params, name, CONVERGED)))
        except ActiveSegError as exc:
            return reports, f"{type(exc).__name__}: {exc}"
        return reports, None


def _liver_added(reports: list[IterationReport], start: Ledger) -> list[int]:
    out, prev = [], start
    for rep in reports:
        if isinstance(rep.iteration, int):
            out.append(rep.ledger.liver_slices - prev.liver_slices)
            prev = rep.ledger
    return out


def run(cfg: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """Run the full experiment and, when ``out_dir`` is given, write all reports."""
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    runner = _Runner(cfg, out)
    if out is not None:
        write_dataset(runner.data, out, cfg.seed, cfg.phantom)
        write_text_atomic(out / "config.json", json.dumps(cfg.to_dict(), indent=2) + "\n")

    reports = [runner.initial()]
    if cfg.data_pool_baseline:
        reports += runner.data_pool()

    partial: dict[str, str] = {}
    arm_reports: dict[str, list[IterationReport]] = {}
    uvs_liver: list[int] = []
    if cfg.iterations:
        first = [a for a in cfg.arms if a in VOLUME_STRATEGIES]
        need_uvs = any(a in SLICE_STRATEGIES for a in cfg.arms) and cfg.budget.slice_budget is None
        if need_uvs and "UVS" not in first:
            # slice budgets follow the UVS arm; run it silently so other arms do not depend on the arm list
            runner.note("UVS: run as slice-budget reference only")
            hidden, err = runner.arm("UVS", emit=False)
            if err:
                partial["UVS-reference"] = err
            uvs_liver = _liver_added(hidden, runner.pool0.ledger)

        with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
            futures = {a: ex.submit(runner.arm, a) for a in first}
            for a, fut in futures.items():
                arm_reports[a], err = fut.result()
                if err:
                    partial[a] = err
        if "UVS" in arm_reports:
            uvs_liver = _liver_added(arm_reports["UVS"], runner.pool0.ledger)
        second = [a for a in cfg.arms if a in SLICE_STRATEGIES]
        with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
            futures = {a: ex.submit(runner.arm, a, uvs_liver) for a in second}
            for a, fut in futures.items():
                arm_reports[a], err = fut.result()
                if err:
                    partial[a] = err

    for a in STRATEGIES:
        for rep in arm_reports.get(a, []):
            reports.append(rep)
            runner.note(
                f"{a} iter {rep.iteration}: slices={rep.ledger.slices} liver={rep.ledger.liver_slices} "
                f"volumes={rep.ledger.volumes} budget={rep.slice_budget} best_step={rep.train_log.best_step} "
                f"val_jaccard={rep.train_log.best_jaccard!r}"
            )
    for a, msg in sorted(partial.items()):
        runner.note(f"{a}: PARTIAL ({msg})")

    result = ExperimentResult(reports, partial, out)
    if out is not None:
        write_reports(result, out, runner.lines)
    return result


def write_reports(result: ExperimentResult, out: Path, lines: list[str]):
    cases = case_rows(result.reports)
    write_text_atomic(out / "cases.csv", csv_text(cases, CASE_FIELDS))
    write_text_atomic(out / "summary.csv", csv_text(summarize_case_rows(cases), SUMMARY_FIELDS))
    write_text_atomic(out / "steps.csv", csv_text(step_rows(result.reports), STEP_FIELDS))
    write_text_atomic(out / "log.txt", "\n".join(lines) + "\n")
    for arm, msg in result.partial.items():
        write_text_atomic(out / f"{arm}.PARTIAL", msg + "\n")
