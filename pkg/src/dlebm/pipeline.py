"""End-to-end orchestration with hash-checked, resumable stages.

Every stage reads its inputs from the run directory and writes its outputs
back there, so a stage whose key (its config sections plus the key of the
previous stage) and artifact hashes are unchanged is skipped on rerun.

Seeds: everything derives from ``PipelineConfig.seed`` via
``derive_seed(seed, STAGE_CODE, ...)`` (numpy SeedSequence).  Codes:
cohort 1, split 2, folds 3, glo 4 (+fold), loc 5 (+roi, +fold), ebm 6,
bootstrap 7.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from .biomarkers import (TOTAL_BRAIN, BiomarkerTable, ColumnSource, FoldLeakageError, check_folds,
                         ensemble_average, select_v_biomarkers, volume_table)
from .ebm import EbmConfig, EbmModel, NotFittedError, TabularDataset, fit_ebm_with_pairs, global_importance
from .evaluation import (METRICS, SplitPlan, corrected_resampled_ttest, evaluate, kfold_split,
                         paired_bootstrap_test, reports_to_csv, stratified_split)
from .occlusion import (OcclusionConfig, RoiSet, extract_roi_cohort, group_occlusion_map, rank_rois,
                        subject_occlusion_map)
from .scorer import MIN_DIM, ConvScorer, TrainConfig, train
from .synthgen import Cohort, SynthConfig, load_cohort, make_cohort, save_cohort
from .volume import Volume, accumulate, read_rv1, write_rv1

log = logging.getLogger(__name__)

STAGES = ("generate", "split", "train-glo", "occlude", "select-rois", "train-loc",
          "biomarkers", "fit-ebm", "evaluate", "compare", "report")
SEED_CODES = {"cohort": 1, "split": 2, "folds": 3, "glo": 4, "loc": 5, "ebm": 6, "bootstrap": 7}
MODELS = ("EBM-DL", "EBM-V", "Glo-CNN", "Glo/Loc-CNN")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class LeakageError(RuntimeError):
    pass


def derive_seed(master: int, *path: int) -> int:
    return int(np.random.SeedSequence([int(master), *map(int, path)]).generate_state(1)[0])


# -- configuration -----------------------------------------------------------

@dataclass
class ScorerConfig:
    c1: int = 8
    c2: int = 16


@dataclass
class SplitConfig:
    test_fraction: float = 0.1
    n_folds: int = 5


@dataclass
class PipelineConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    occlusion: OcclusionConfig = field(default_factory=OcclusionConfig)
    ebm: EbmConfig = field(default_factory=EbmConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    n_features: int = 11
    n_pairs: int = 2
    bootstrap_reps: int = 1000
    per_fold_rois: bool = False

    def validate(self) -> "PipelineConfig":
        dims = self.synth.dims
        occ = self.occlusion
        for name, size in (("occlusion_size", occ.occlusion_size), ("roi_size", occ.roi_size)):
            if any(s > d for s, d in zip(size, dims)):
                raise ConfigError(f"{name} {size} does not fit volume dims {dims}")
        if min(occ.roi_size) < MIN_DIM:
            raise ConfigError(f"roi_size {occ.roi_size} below the scorer minimum {MIN_DIM}")
        if not 0.0 < self.split.test_fraction < 1.0:
            raise ConfigError("split.test_fraction must lie in (0, 1)")
        if self.split.n_folds < 2:
            raise ConfigError("split.n_folds must be >= 2")
        if self.n_features != 1 + occ.top_k:
            raise ConfigError(f"n_features={self.n_features} must equal 1 global + top_k={occ.top_k} ROI features")
        if self.n_features > self.synth.n_regions + 1:
            raise ConfigError("the volume arm has fewer candidate columns than n_features")
        if self.n_pairs < 0 or self.bootstrap_reps < 1:
            raise ConfigError("n_pairs must be >= 0 and bootstrap_reps >= 1")
        return self

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "synth": self.synth.to_dict(), "scorer": asdict(self.scorer),
             "train": asdict(self.train), "occlusion": _jsonable(asdict(self.occlusion)),
             "ebm": asdict(self.ebm), "split": asdict(self.split), "n_features": self.n_features,
             "n_pairs": self.n_pairs, "bootstrap_reps": self.bootstrap_reps,
             "per_fold_rois": self.per_fold_rois}
        d["synth"].pop("seed")  # derived from the master seed
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d or {})
        sections = {"synth": SynthConfig, "scorer": ScorerConfig, "train": TrainConfig,
                    "occlusion": OcclusionConfig, "ebm": EbmConfig, "split": SplitConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        try:
            for k, v in d.items():
                if k in sections:
                    sub = dict(v or {})
                    if k == "synth":
                        sub.pop("seed", None)
                    kw[k] = sections[k](**sub)
                else:
                    kw[k] = v
            return cls(**kw).validate()
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path: str | Path, overrides: Sequence[str] = ()) -> "PipelineConfig":
        try:
            d = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_dict(apply_overrides(d, overrides))

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def synth_config(self) -> SynthConfig:
        return replace(self.synth, seed=derive_seed(self.seed, SEED_CODES["cohort"]))

    def protocol(self) -> dict:
        return {"test_fraction": self.split.test_fraction, "n_folds": self.split.n_folds,
                "top_k_rois": self.occlusion.top_k, "n_features": self.n_features,
                "n_pairs": self.n_pairs, "learning_rate": self.train.learning_rate,
                "batch_size": self.train.batch_size}


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable(v) for v in d]
    return d


def apply_overrides(d: dict, overrides: Sequence[str]) -> dict:
    """``section.key=value`` strings (value parsed as YAML) applied onto a config dict."""
    d = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a scalar")
        node[parts[-1]] = yaml.safe_load(raw)
    return d


# -- manifest ----------------------------------------------------------------

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class StageRecord:
    key: str
    artifacts: dict[str, str]  # relative path -> sha256
    seconds: float


@dataclass
class RunManifest:
    root: Path
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    protocol: dict = field(default_factory=dict)
    observed: dict = field(default_factory=dict)
    stages: dict[str, StageRecord] = field(default_factory=dict)

    @property
    def path(self) -> Path:
        return self.root / "manifest.json"

    def verify_stage(self, name: str, key: str) -> bool:
        rec = self.stages.get(name)
        if rec is None or rec.key != key:
            return False
        for rel, digest in rec.artifacts.items():
            p = self.root / rel
            if not p.is_file() or sha256_file(p) != digest:
                return False
        return True

    def verify(self) -> list[str]:
        """Relative paths of artifacts that are missing or no longer hash-match."""
        bad = []
        for rec in self.stages.values():
            for rel, digest in rec.artifacts.items():
                p = self.root / rel
                if not p.is_file() or sha256_file(p) != digest:
                    bad.append(rel)
        return bad

    def hashes(self) -> dict[str, str]:
        return {rel: d for rec in self.stages.values() for rel, d in sorted(rec.artifacts.items())}

    def to_dict(self) -> dict:
        return {"config": self.config, "seeds": self.seeds, "protocol": self.protocol,
                "observed": self.observed,
                "stages": {k: asdict(v) for k, v in self.stages.items()}}

    def save(self) -> None:
        self.path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, root: str | Path) -> "RunManifest":
        root = Path(root)
        d = json.loads((root / "manifest.json").read_text())
        return cls(root, d["config"], d["seeds"], d["protocol"], d.get("observed", {}),
                   {k: StageRecord(**v) for k, v in d["stages"].items()})


# -- small io helpers ---------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    path.write_text(buf.getvalue())


def _read_csv(path: Path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _disjoint(stage: str, what: str, a, b) -> None:
    common = set(a) & set(b)
    if common:
        raise LeakageError(f"[{stage}] {what}: {len(common)} test subject(s) used, e.g. {sorted(common)[:3]}")


# -- the run context ---------------------------------------------------------

class Run:
    """One pipeline run rooted at ``root``; stages communicate through files."""

    def __init__(self, cfg: PipelineConfig, root: str | Path):
        self.cfg = cfg.validate()
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        if (self.root / "manifest.json").exists():
            self.manifest = RunManifest.load(self.root)
        else:
            self.manifest = RunManifest(self.root)
        self.manifest.config = cfg.to_dict()
        self.manifest.protocol = cfg.protocol()
        self.manifest.seeds = {"master": cfg.seed, "cohort": cfg.synth_config().seed,
                               "split": self.seed("split"), "folds": self.seed("folds"),
                               "glo": self.seed("glo"), "loc": self.seed("loc"),
                               "ebm": self.seed("ebm"), "bootstrap": self.seed("bootstrap")}
        self._cohort: Cohort | None = None

    def seed(self, stage: str, *path: int) -> int:
        return derive_seed(self.cfg.seed, SEED_CODES[stage], *path)

    # stage keys chain through the previous stage, so changes propagate downstream
    def _sections(self, stage: str) -> dict:
        c = self.cfg.to_dict()
        pick = {
            "generate": ["synth"], "split": ["split"], "train-glo": ["scorer", "train"],
            "occlude": ["occlusion"], "select-rois": ["occlusion", "per_fold_rois"],
            "train-loc": ["scorer", "train"], "biomarkers": ["n_features"],
            "fit-ebm": ["ebm", "n_pairs"], "evaluate": ["bootstrap_reps"],
            "compare": ["bootstrap_reps", "ebm", "n_pairs"], "report": [],
        }[stage]
        return {"seed": c["seed"], **{k: c[k] for k in pick}}

    def stage_key(self, stage: str) -> str:
        i = STAGES.index(stage)
        prev = self.stage_key(STAGES[i - 1]) if i else ""
        blob = json.dumps({"stage": stage, "prev": prev, "cfg": self._sections(stage)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def cohort(self) -> Cohort:
        if self._cohort is None:
            self._cohort = load_cohort(self.root / "cohort")
        return self._cohort

    def split_info(self) -> dict:
        d = json.loads((self.root / "split.json").read_text())
        d["split"] = SplitPlan.from_dict(d["split"])
        d["folds"] = SplitPlan.from_dict(d["folds"])
        d["opt_idx"] = np.asarray(d["opt_idx"], dtype=np.int64)
        d["test_idx"] = np.asarray(d["test_idx"], dtype=np.int64)
        return d

    def fold_indices(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(train, test) indices into the cohort for each fold of the optimization set."""
        s = self.split_info()
        opt = s["opt_idx"]
        return [(opt[tr], opt[te]) for tr, te in (s["folds"].fold(k) for k in range(s["folds"].n_parts))]

    def roi_sets(self) -> list[RoiSet]:
        """ROI set used by each fold (the same set repeated unless per-fold selection is on)."""
        k = self.cfg.split.n_folds
        if self.cfg.per_fold_rois:
            return [RoiSet.from_json((self.root / f"rois/fold{i}.json").read_text()) for i in range(k)]
        rois = RoiSet.from_json((self.root / "rois/rois.json").read_text())
        return [rois] * k

    # -- execution -----------------------------------------------------------
    def run(self, until: str = "report", force: Sequence[str] = ()) -> RunManifest:
        if until not in STAGES:
            raise ConfigError(f"unknown stage {until!r}")
        for stage in STAGES[: STAGES.index(until) + 1]:
            self.run_stage(stage, force=stage in force)
        return self.manifest

    def run_stage(self, stage: str, force: bool = False) -> bool:
        """Run ``stage`` unless its cached outputs are valid; returns True when it ran."""
        key = self.stage_key(stage)
        if not force and self.manifest.verify_stage(stage, key):
            log.info("stage %s: cached", stage)
            return False
        i = STAGES.index(stage)
        if i and not self.manifest.verify_stage(STAGES[i - 1], self.stage_key(STAGES[i - 1])):
            raise StageError(stage, f"upstream stage {STAGES[i - 1]!r} has no valid outputs")
        t0 = time.perf_counter()
        try:
            written = STAGE_FUNCS[stage](self)
        except (LeakageError, FoldLeakageError, StageError):
            raise
        except Exception as e:
            raise StageError(stage, f"{type(e).__name__}: {e}") from e
        self._cohort = None if stage == "generate" else self._cohort
        arts = {rel: sha256_file(self.root / rel) for rel in sorted(written)}
        self.manifest.stages[stage] = StageRecord(key, arts, round(time.perf_counter() - t0, 3))
        # downstream records are stale now
        for later in STAGES[i + 1:]:
            self.manifest.stages.pop(later, None)
        self.manifest.save()
        log.info("stage %s: %.1fs", stage, self.manifest.stages[stage].seconds)
        return True


def _rel(run: Run, p: Path) -> str:
    return str(p.relative_to(run.root))


# -- stages --------------------------------------------------------------------

def stage_generate(run: Run) -> list[str]:
    cohort = make_cohort(run.cfg.synth_config())
    d = run.root / "cohort"
    save_cohort(cohort, d)
    return [_rel(run, p) for p in sorted(d.rglob("*")) if p.is_file()]


def stage_split(run: Run) -> list[str]:
    cohort = run.cohort
    sc = run.cfg.split
    plan = stratified_split(cohort.labels, sc.test_fraction, run.seed("split"))
    opt, test = plan.train_idx, plan.test_idx
    folds = kfold_split(cohort.labels[opt], sc.n_folds, run.seed("folds"))
    _disjoint("split", "optimization/test overlap", [cohort.ids[i] for i in opt],
              [cohort.ids[i] for i in test])
    out = run.root / "split.json"
    _write_json(out, {"split": plan.to_dict(), "folds": folds.to_dict(),
                      "opt_idx": opt.tolist(), "test_idx": test.tolist(),
                      "opt_ids": [cohort.ids[i] for i in opt],
                      "test_ids": [cohort.ids[i] for i in test]})
    return [_rel(run, out)]


def _train_fold(run: Run, volumes, labels, seed: int) -> ConvScorer:
    sc = run.cfg.scorer
    scorer = ConvScorer(sc.c1, sc.c2, seed=seed)
    return train(scorer, volumes, labels, replace(run.cfg.train, seed=seed)).scorer


def _cv_scorers(run: Run, stage: str, volumes: list[Volume], tag: str, seed_path: tuple[int, ...],
                model_dir: Path) -> tuple[list[str], list[tuple]]:
    """Train one scorer per fold; return written files and prediction rows."""
    cohort = run.cohort
    info = run.split_info()
    test_ids = set(info["test_ids"])
    folds = run.fold_indices()
    check_folds([(np.searchsorted(info["opt_idx"], tr), np.searchsorted(info["opt_idx"], te))
                 for tr, te in folds], len(info["opt_idx"]))
    written, rows = [], []
    held = info["test_idx"]
    held_preds = []
    for k, (tr, te) in enumerate(folds):
        _disjoint(stage, f"{tag} fold {k} training set", [cohort.ids[i] for i in tr], test_ids)
        _disjoint(stage, f"{tag} fold {k} train/test", [cohort.ids[i] for i in tr],
                  [cohort.ids[i] for i in te])
        scorer = _train_fold(run, [volumes[i] for i in tr], cohort.labels[tr],
                             run.seed(*seed_path, k))
        path = model_dir / f"{tag}_fold{k}"
        scorer.save(path)
        written += [_rel(run, path.with_suffix(".json")), _rel(run, path.with_suffix(".bin"))]
        p = scorer.predict([volumes[i] for i in te])
        rows += [(cohort.ids[i], "opt", k, float(v)) for i, v in zip(te, p)]
        held_preds.append(scorer.predict([volumes[i] for i in held]))
    mean_held = np.mean(held_preds, axis=0)
    rows += [(cohort.ids[i], "test", -1, float(v)) for i, v in zip(held, mean_held)]
    return written, rows


def stage_train_glo(run: Run) -> list[str]:
    d = run.root / "glo"
    d.mkdir(exist_ok=True)
    written, rows = _cv_scorers(run, "train-glo", run.cohort.volumes, "glo", ("glo",), d)
    out = d / "predictions.csv"
    _write_csv(out, ["id", "role", "fold", "probability"], rows)
    return written + [_rel(run, out)]


def stage_occlude(run: Run) -> list[str]:
    """Out-of-fold subject maps summed per fold (fold k's test subjects under scorer k)."""
    cohort = run.cohort
    test_ids = set(run.split_info()["test_ids"])
    d = run.root / "maps"
    d.mkdir(exist_ok=True)
    written = []
    for k, (_, te) in enumerate(run.fold_indices()):
        _disjoint("occlude", f"fold {k} map subjects", [cohort.ids[i] for i in te], test_ids)
        scorer = ConvScorer.load(run.root / "glo" / f"glo_fold{k}")
        maps = [subject_occlusion_map(scorer, cohort.volumes[i], run.cfg.occlusion) for i in te]
        path = d / f"fold{k}.rv1"
        write_rv1(path, group_occlusion_map(maps, run.cfg.occlusion.absolute))
        written.append(_rel(run, path))
    fold_maps = [read_rv1(run.root / w) for w in written]
    path = d / "group.rv1"
    write_rv1(path, group_occlusion_map(fold_maps))
    return written + [_rel(run, path)]


def stage_select_rois(run: Run) -> list[str]:
    d = run.root / "rois"
    d.mkdir(exist_ok=True)
    k = run.cfg.split.n_folds
    if run.cfg.per_fold_rois:
        fold_maps = [read_rv1(run.root / "maps" / f"fold{i}.rv1") for i in range(k)]
        written = []
        for i in range(k):
            # fold i's ROIs come only from subjects outside fold i
            g = group_occlusion_map([m for j, m in enumerate(fold_maps) if j != i])
            path = d / f"fold{i}.json"
            path.write_text(rank_rois(g, run.cfg.occlusion).to_json())
            written.append(_rel(run, path))
        return written
    path = d / "rois.json"
    path.write_text(rank_rois(read_rv1(run.root / "maps" / "group.rv1"), run.cfg.occlusion).to_json())
    return [_rel(run, path)]


def stage_train_loc(run: Run) -> list[str]:
    cohort = run.cohort
    info = run.split_info()
    test_ids = set(info["test_ids"])
    d = run.root / "loc"
    d.mkdir(exist_ok=True)
    roi_sets = run.roi_sets()
    written, rows = [], []
    held = info["test_idx"]
    for r in range(run.cfg.occlusion.top_k):
        held_preds = []
        for k, (tr, te) in enumerate(run.fold_indices()):
            _disjoint("train-loc", f"ROI{r + 1} fold {k} training set", [cohort.ids[i] for i in tr], test_ids)
            patch = roi_sets[k][r].patch
            vols = extract_roi_cohort(cohort.volumes, patch)
            scorer = _train_fold(run, [vols[i] for i in tr], cohort.labels[tr], run.seed("loc", r, k))
            path = d / f"roi{r + 1}_fold{k}"
            scorer.save(path)
            written += [_rel(run, path.with_suffix(".json")), _rel(run, path.with_suffix(".bin"))]
            p = scorer.predict([vols[i] for i in te])
            rows += [(f"ROI{r + 1}", cohort.ids[i], "opt", k, float(v)) for i, v in zip(te, p)]
            held_preds.append(scorer.predict([vols[i] for i in held]))
        mean_held = np.mean(held_preds, axis=0)
        rows += [(f"ROI{r + 1}", cohort.ids[i], "test", -1, float(v)) for i, v in zip(held, mean_held)]
    out = d / "predictions.csv"
    _write_csv(out, ["roi", "id", "role", "fold", "probability"], rows)
    return written + [_rel(run, out)]


def _dl_tables(run: Run) -> tuple[BiomarkerTable, BiomarkerTable]:
    cohort = run.cohort
    info = run.split_info()
    pos = {sid: i for i, sid in enumerate(cohort.ids)}
    glo = {(r["id"], r["role"]): float(r["probability"]) for r in _read_csv(run.root / "glo/predictions.csv")}
    loc = {(r["roi"], r["id"], r["role"]): float(r["probability"])
           for r in _read_csv(run.root / "loc/predictions.csv")}
    names = ["Glo"] + [f"ROI{r + 1}" for r in range(run.cfg.occlusion.top_k)]
    prov = [ColumnSource("DL-global", "glo")] + [ColumnSource("DL-roi", n) for n in names[1:]]
    tables = []
    for role, ids in (("opt", info["opt_ids"]), ("test", info["test_ids"])):
        X = [[glo[(sid, role)]] + [loc[(n, sid, role)] for n in names[1:]] for sid in ids]
        y = cohort.labels[[pos[s] for s in ids]]
        tables.append(BiomarkerTable(TabularDataset(np.array(X), y, names), prov, list(ids)))
    return tables[0], tables[1]


def stage_biomarkers(run: Run) -> list[str]:
    cohort = run.cohort
    info = run.split_info()
    d = run.root / "tables"
    d.mkdir(exist_ok=True)
    dl_opt, dl_test = _dl_tables(run)
    if dl_opt.data.n_features != run.cfg.n_features:
        raise StageError("biomarkers", f"DL arm has {dl_opt.data.n_features} features, expected {run.cfg.n_features}")
    opt, test = info["opt_idx"], info["test_idx"]
    v_all = volume_table(cohort.volumes, cohort.labels, cohort.icv, cohort.atlas, cohort.ids)
    v_opt = BiomarkerTable(v_all.data.subset(opt), v_all.provenance, [cohort.ids[i] for i in opt])
    v_test = BiomarkerTable(v_all.data.subset(test), v_all.provenance, [cohort.ids[i] for i in test])
    _disjoint("biomarkers", "V selection rows", v_opt.subject_ids, info["test_ids"])
    chosen = select_v_biomarkers(v_opt, v_opt.data.labels, run.cfg.n_features)
    cols = [j for j, _, _ in chosen]
    written = []
    for name, table in (("dl_opt", dl_opt), ("dl_test", dl_test),
                        ("v_opt", v_opt.select(cols)), ("v_test", v_test.select(cols)),
                        ("v_all_opt", v_opt)):
        table.save(d / name)
        written += [f"tables/{name}.csv", f"tables/{name}.json"]
    path = d / "v_selection.json"
    _write_json(path, [{"column": n, "p_value": p} for _, n, p in chosen])
    return written + [_rel(run, path)]


def _load_table(run: Run, name: str) -> BiomarkerTable:
    return BiomarkerTable.load(run.root / "tables" / name)


def stage_fit_ebm(run: Run) -> list[str]:
    info = run.split_info()
    cfg = replace(run.cfg.ebm, seed=run.seed("ebm"))
    d = run.root / "models"
    d.mkdir(exist_ok=True)
    written = []
    for arm in ("dl", "v"):
        table = _load_table(run, f"{arm}_opt")
        _disjoint("fit-ebm", f"EBM-{arm.upper()} rows", table.subject_ids, info["test_ids"])
        model = fit_ebm_with_pairs(table.data, cfg, run.cfg.n_pairs)
        path = d / f"ebm_{arm}.json"
        path.write_text(model.to_json())
        written.append(_rel(run, path))
    return written


def _test_scores(run: Run) -> tuple[list[str], np.ndarray, dict[str, np.ndarray]]:
    dl_test, v_test = _load_table(run, "dl_test"), _load_table(run, "v_test")
    if dl_test.subject_ids != v_test.subject_ids:
        raise StageError("evaluate", "DL and V test tables list different subjects")
    ebm_dl = EbmModel.from_json((run.root / "models/ebm_dl.json").read_text())
    ebm_v = EbmModel.from_json((run.root / "models/ebm_v.json").read_text())
    X = dl_test.data.features
    scores = {
        "EBM-DL": ebm_dl.predict_proba(X),
        "EBM-V": ebm_v.predict_proba(v_test.data.features),
        "Glo-CNN": X[:, 0].copy(),
        "Glo/Loc-CNN": np.array([ensemble_average(r[0], r[1:]) for r in X]),
    }
    return dl_test.subject_ids, dl_test.data.labels, scores


def stage_evaluate(run: Run) -> list[str]:
    ids, y, scores = _test_scores(run)
    d = run.root / "reports"
    d.mkdir(exist_ok=True)
    reports = {m: evaluate(scores[m], y, reps=run.cfg.bootstrap_reps, seed=run.seed("bootstrap"))
               for m in MODELS}
    (d / "metrics.csv").write_text(reports_to_csv([reports[m].csv_row(m) for m in MODELS]))
    _write_json(d / "metrics.json", {m: reports[m].to_dict() for m in MODELS})
    _write_csv(d / "predictions.csv", ["id", "label", *MODELS],
               [(sid, int(lab), *(float(scores[m][i]) for m in MODELS)) for i, (sid, lab) in enumerate(zip(ids, y))])
    return ["reports/metrics.csv", "reports/metrics.json", "reports/predictions.csv"]


# -- comparison -----------------------------------------------------------------

@dataclass
class CvFoldMetrics:
    values: dict[str, dict[str, list[float]]]  # model -> metric -> per-fold values
    n_train: int
    n_test: int


def compare_models(scores: dict[str, np.ndarray], labels, cv: CvFoldMetrics | None,
                   pairs: Sequence[tuple[str, str]], reps: int = 1000, seed: int = 0,
                   metrics: Sequence[str] = ("ACC", "AUC")) -> list[dict]:
    """Pairwise differences: paired bootstrap on held-out scores, corrected
    resampled t-test on per-fold CV metrics (when available)."""
    y = np.asarray(labels)
    rows = []
    for a, b in pairs:
        if np.asarray(scores[a]).shape != y.shape or np.asarray(scores[b]).shape != y.shape:
            raise ValueError("mismatched subject sets")
        for m in metrics:
            r = paired_bootstrap_test(scores[a], scores[b], y, m, reps=reps, seed=seed)
            rows.append({"model_a": a, "model_b": b, "metric": m, "source": "held-out",
                         "diff": r.diff, "ci_lo": r.ci[0], "ci_hi": r.ci[1], "p": r.p,
                         "degenerate": r.degenerate})
            if cv is not None and a in cv.values and b in cv.values:
                d = np.asarray(cv.values[a][m]) - np.asarray(cv.values[b][m])
                t = corrected_resampled_ttest(d, cv.n_train, cv.n_test)
                rows.append({"model_a": a, "model_b": b, "metric": m, "source": "cv",
                             "diff": float(d.mean()), "ci_lo": float("nan"), "ci_hi": float("nan"),
                             "p": t.p, "degenerate": t.degenerate, "t": t.t})
    return rows


def _cv_metrics(run: Run) -> CvFoldMetrics:
    """Per-fold metrics of both EBM arms and the Glo-CNN inside the optimization set.

    The V arm re-selects its columns on each fold's training rows.
    """
    cfg = replace(run.cfg.ebm, seed=run.seed("ebm"))
    info = run.split_info()
    folds = info["folds"]
    dl = _load_table(run, "dl_opt")
    v_all = _load_table(run, "v_all_opt")
    out = {m: {"ACC": [], "AUC": []} for m in ("EBM-DL", "EBM-V", "Glo-CNN")}
    n_tr = n_te = 0
    for k in range(folds.n_parts):
        tr, te = folds.fold(k)
        n_tr, n_te = tr.size, te.size
        y_te = dl.data.labels[te]
        m_dl = fit_ebm_with_pairs(dl.data.subset(tr), cfg, run.cfg.n_pairs)
        sub = BiomarkerTable(v_all.data.subset(tr), v_all.provenance)
        cols = [j for j, _, _ in select_v_biomarkers(sub, sub.data.labels, run.cfg.n_features)]
        m_v = fit_ebm_with_pairs(v_all.data.subset(tr).columns(cols), cfg, run.cfg.n_pairs)
        preds = {"EBM-DL": m_dl.predict_proba(dl.data.features[te]),
                 "EBM-V": m_v.predict_proba(v_all.data.features[te][:, cols]),
                 "Glo-CNN": dl.data.features[te, 0]}
        for m, p in preds.items():
            for metric in ("ACC", "AUC"):
                out[m][metric].append(float(METRICS[metric](p, y_te)))
    return CvFoldMetrics(out, n_tr, n_te)


def stage_compare(run: Run) -> list[str]:
    ids, y, scores = _test_scores(run)
    cv = _cv_metrics(run)
    pairs = [("EBM-DL", "EBM-V"), ("EBM-DL", "Glo-CNN"), ("EBM-DL", "Glo/Loc-CNN")]
    rows = compare_models(scores, y, cv, pairs, reps=run.cfg.bootstrap_reps, seed=run.seed("bootstrap"))
    d = run.root / "reports"
    header = ["model_a", "model_b", "metric", "source", "diff", "ci_lo", "ci_hi", "p", "degenerate", "t"]
    _write_csv(d / "comparison.csv", header, [[r.get(h, "") for h in header] for r in rows])
    _write_json(d / "comparison.json", _nan_to_none(rows))
    _write_csv(d / "cv_folds.csv", ["model", "metric", "fold", "value"],
               [(m, metric, k, v) for m, md in cv.values.items() for metric, vals in md.items()
                for k, v in enumerate(vals)])
    return ["reports/comparison.csv", "reports/comparison.json", "reports/cv_folds.csv"]


def _nan_to_none(obj):
    if isinstance(obj, float) and obj != obj:
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


# -- importance ----------------------------------------------------------------

def report_importance(model: EbmModel | None, table: BiomarkerTable) -> tuple[list[dict], dict]:
    """Ranked non-zero term importances plus per-term shape dumps (bin edges -> scores)."""
    if model is None or not model.mains:
        raise NotFittedError("report_importance needs a fitted model")
    prov = {n: p for n, p in zip(table.data.feature_names, table.provenance)}
    rows = []
    for term, imp in global_importance(model, table.data):
        if imp <= 0.0:
            continue
        parts = term.split(" × ")
        rows.append({"rank": len(rows) + 1, "term": term, "importance": imp,
                     "kind": " × ".join(prov[p].kind if p in prov else "?" for p in parts),
                     "source": " × ".join(prov[p].source if p in prov else p for p in parts)})
    cuts = model.bin_map.cuts
    shapes = {"intercept": model.intercept, "terms": []}
    for j, name in enumerate(model.feature_names):
        shapes["terms"].append({"term": name, "type": "main", "edges": cuts[j].tolist(),
                                "scores": model.mains[j].tolist()})
    for p in model.pairs:
        shapes["terms"].append({"term": f"{model.feature_names[p.i]} × {model.feature_names[p.j]}",
                                "type": "pair", "edges_a": cuts[p.i].tolist(),
                                "edges_b": cuts[p.j].tolist(), "scores": p.grid.tolist()})
    return rows, shapes


def stage_report(run: Run) -> list[str]:
    d = run.root / "reports"
    written = []
    observed = {}
    for arm in ("dl", "v"):
        model = EbmModel.from_json((run.root / f"models/ebm_{arm}.json").read_text())
        table = _load_table(run, f"{arm}_opt")
        rows, shapes = report_importance(model, table)
        header = ["rank", "term", "importance", "kind", "source"]
        _write_csv(d / f"importance_{arm}.csv", header, [[r[h] for h in header] for r in rows])
        _write_json(d / f"shapes_{arm}.json", shapes)
        written += [f"reports/importance_{arm}.csv", f"reports/shapes_{arm}.json"]
        observed[f"ebm_{arm}"] = {"n_features": model.n_features, "n_pairs": len(model.pairs),
                                  "terms": model.term_names()}
    info = run.split_info()
    observed["n_opt"] = len(info["opt_ids"])
    observed["n_test"] = len(info["test_ids"])
    observed["n_folds"] = info["folds"].n_parts
    observed["n_rois"] = len(run.roi_sets()[0])
    observed["roi_origins"] = [list(o) for o in run.roi_sets()[0].origins()]
    glo = json.loads((run.root / "glo/glo_fold0.json").read_text())
    observed["scorer"] = {"c1": glo["c1"], "c2": glo["c2"]}
    observed["train"] = {"learning_rate": run.cfg.train.learning_rate, "batch_size": run.cfg.train.batch_size}
    run.manifest.observed = observed
    path = d / "summary.json"
    _write_json(path, observed)
    return written + [_rel(run, path)]


STAGE_FUNCS: dict[str, Callable[[Run], list[str]]] = {
    "generate": stage_generate, "split": stage_split, "train-glo": stage_train_glo,
    "occlude": stage_occlude, "select-rois": stage_select_rois, "train-loc": stage_train_loc,
    "biomarkers": stage_biomarkers, "fit-ebm": stage_fit_ebm, "evaluate": stage_evaluate,
    "compare": stage_compare, "report": stage_report,
}


def run_full(cfg: PipelineConfig, root: str | Path, until: str = "report") -> RunManifest:
    return Run(cfg, root).run(until)
