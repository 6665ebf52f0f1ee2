"""Run configuration, artifact layout and the stages behind the CLI.

Every stage reads and writes only below the run's output directory::

    data/<dataset>/manifest.json          gen-data
    models/pretrained.papf                pretrain
    models/finetuned_<dataset>.papf       finetune (+ .drift.csv)
    perturbations/<label>.papt            attack   (+ .step<N>.papt, .trace.papt)
    eval/eval.csv                         evaluate
    analysis/ga.json                      analyze-ga
    report/report.csv, report.json        report

Each artifact has a ``<file>.meta.json`` sidecar with the config hash, the
seed and the tool version. Consumers refuse inputs whose sidecar hash
differs from the current config unless ``force`` is set.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from . import __version__
from .attacks import AttackConfig, fit_linear_head, generate
from .datagen import DatasetSpec, generate_dataset, load_dataset, load_tensor, save_dataset, save_tensor
from .evaluate import build_report, evaluate, read_eval_csv, write_eval_csv
from .ga import GradientTrace, ga_cosine, lemma1_check, lemma2_check, theorem_check, write_analysis_json
from .nets import NUM_BLOCKS, Model, load_checkpoint, model_hash, save_checkpoint
from .training import TrainConfig, finetune, pretrain

log = logging.getLogger(__name__)

ROLES = ("pretrain", "downstream")


class PipelineError(Exception):
    exit_code = 1
    kind = "pipeline_error"

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details

    def to_json(self) -> dict:
        return {"error": self.kind, "message": str(self), **self.details}


class ConfigError(PipelineError):
    exit_code = 2
    kind = "config_error"


class MissingArtifact(PipelineError):
    exit_code = 3
    kind = "missing_artifact"


class HashMismatch(PipelineError):
    exit_code = 4
    kind = "config_hash_mismatch"


# -- configuration -------------------------------------------------------------

_NUM = {"type": "number"}
_INT = {"type": "integer"}

_DATASET_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["name", "role"],
    "properties": {
        "role": {"enum": list(ROLES)},
        "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "num_classes": {"type": "integer", "minimum": 2},
        "samples_per_class": {"type": "integer", "minimum": 2},
        "image_shape": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3},
        "pixel_mean": _NUM,
        "pixel_std": _NUM,
        "noise_level": _NUM,
        "brightness_jitter": _NUM,
        "pattern_seed": _INT,
        "train_fraction": _NUM,
        "freq_range": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
    },
}

_TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "epochs": {"type": "integer", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "lr": _NUM,
        "momentum": _NUM,
        "mode": {"enum": ["supervised", "rotation"]},
    },
}

_ATTACK_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["method"],
    "properties": {
        "method": {"type": "string"},
        "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "epsilon": _NUM,
        "k": _INT,
        "k1": _INT,
        "k2": _INT,
        "lam": _NUM,
        "mu": _NUM,
        "ugs_ranges": {"type": "array", "items": _NUM, "minItems": 4, "maxItems": 4},
        "steps": {"type": "integer", "minimum": 0},
        "step_size": _NUM,
        "batch_size": {"type": "integer", "minimum": 1},
        "momentum": _NUM,
        "uap_max_iter": {"type": "integer", "minimum": 1},
        "uap_overshoot": _NUM,
        "trace_dense": {"type": "integer", "minimum": 0},
        "trace_stride": {"type": "integer", "minimum": 0},
    },
}

RUN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["datasets", "pretrain", "finetune", "attacks", "eval"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "output_dir": {"type": "string"},
        "datasets": {"type": "array", "items": _DATASET_SCHEMA, "minItems": 2},
        "pretrain": _TRAIN_SCHEMA,
        "finetune": _TRAIN_SCHEMA,
        "attacks": {"type": "array", "items": _ATTACK_SCHEMA, "minItems": 1},
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "required": ["checkpoints"],
            "properties": {"checkpoints": {"type": "array", "items": {"type": "integer", "minimum": 1}}},
        },
        "uap_head": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"epochs": {"type": "integer", "minimum": 0}, "lr": _NUM},
        },
        "analysis": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "checks": {"type": "boolean"},
                "theorem_trials": {"type": "integer", "minimum": 2},
                "lemma1_trials": {"type": "integer", "minimum": 2},
                "lemma2_draws": {"type": "integer", "minimum": 1},
            },
        },
    },
}


@dataclass
class RunConfig:
    raw: dict
    seed: int
    output_dir: Path
    source: DatasetSpec
    downstream: list[DatasetSpec]
    pretrain: TrainConfig
    finetune: TrainConfig
    attacks: list[AttackConfig]
    checkpoints: tuple[int, ...]
    uap_head: dict = field(default_factory=dict)
    analysis: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict, seed: int | None = None, output_dir=None) -> "RunConfig":
        try:
            jsonschema.validate(doc, RUN_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"invalid config at {where}: {exc.message}") from None
        raw = copy.deepcopy(doc)
        seed = int(raw.get("seed", 0) if seed is None else seed)
        if not 0 <= seed < 2**64:
            raise ConfigError(f"seed {seed} outside the unsigned 64-bit range")
        out = output_dir if output_dir is not None else raw.get("output_dir")
        if out is None:
            raise ConfigError("no output directory: set output_dir in the config or pass --output")

        specs = {"pretrain": [], "downstream": []}
        for d in raw["datasets"]:
            d = dict(d)
            role = d.pop("role")
            spec = DatasetSpec.from_dict(d)
            try:
                spec.validate()
            except ValueError as exc:
                raise ConfigError(f"dataset {spec.name!r}: {exc}") from None
            specs[role].append(spec)
        if len(specs["pretrain"]) != 1:
            raise ConfigError("exactly one dataset must have role 'pretrain'")
        if not specs["downstream"]:
            raise ConfigError("at least one dataset must have role 'downstream'")
        names = [s.name for s in specs["pretrain"] + specs["downstream"]]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate dataset names in {names}")

        train_cfgs = {}
        for key in ("pretrain", "finetune"):
            tc = TrainConfig(**raw[key], seed=seed)
            try:
                tc.validate()
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
            train_cfgs[key] = tc

        checkpoints = tuple(sorted(set(raw["eval"]["checkpoints"])))
        attacks = []
        for a in raw["attacks"]:
            ac = AttackConfig(**a, seed=seed, checkpoints=checkpoints)
            try:
                ac.validate()
            except ValueError as exc:
                raise ConfigError(f"attack {ac.label!r}: {exc}") from None
            attacks.append(ac)
        labels = [a.label for a in attacks]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"attack labels must be unique, got {labels}")

        return cls(
            raw=raw,
            seed=seed,
            output_dir=Path(out),
            source=specs["pretrain"][0],
            downstream=specs["downstream"],
            pretrain=train_cfgs["pretrain"],
            finetune=train_cfgs["finetune"],
            attacks=attacks,
            checkpoints=checkpoints,
            uap_head={"epochs": 10, "lr": 0.1, **raw.get("uap_head", {})},
            analysis={"checks": False, "theorem_trials": 10_000, "lemma1_trials": 10_000,
                      "lemma2_draws": 100_000, **raw.get("analysis", {})},
        )

    def hash(self) -> str:
        """Hash of the effective experiment; the output directory is excluded."""
        doc = {k: v for k, v in self.raw.items() if k != "output_dir"}
        doc["seed"] = self.seed
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def attack(self, label: str) -> AttackConfig:
        for a in self.attacks:
            if a.label == label:
                return a
        raise ConfigError(f"no attack labelled {label!r}; have {[a.label for a in self.attacks]}")

    def dataset(self, name: str) -> DatasetSpec:
        for s in [self.source] + self.downstream:
            if s.name == name:
                return s
        raise ConfigError(f"no dataset named {name!r}")


def default_config_path() -> Path:
    return Path(str(resources.files("pap") / "configs" / "default.json"))


def load_config(path=None, seed: int | None = None, output_dir=None) -> RunConfig:
    path = default_config_path() if path is None else Path(path)
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return RunConfig.from_dict(doc, seed=seed, output_dir=output_dir)


# -- artifact workspace --------------------------------------------------------


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


class Workspace:
    def __init__(self, cfg: RunConfig, force: bool = False):
        self.cfg = cfg
        self.root = cfg.output_dir
        self.force = force
        self.config_hash = cfg.hash()

    # layout
    def dataset_manifest(self, name: str) -> Path:
        return self.root / "data" / name / "manifest.json"

    @property
    def pretrained(self) -> Path:
        return self.root / "models" / "pretrained.papf"

    def finetuned(self, name: str) -> Path:
        return self.root / "models" / f"finetuned_{name}.papf"

    def drift_csv(self, name: str) -> Path:
        return self.root / "models" / f"finetuned_{name}.drift.csv"

    def perturbation(self, label: str, step: int | None = None) -> Path:
        suffix = "" if step is None else f".step{step}"
        return self.root / "perturbations" / f"{label}{suffix}.papt"

    def trace(self, label: str) -> Path:
        return self.root / "perturbations" / f"{label}.trace.papt"

    @property
    def eval_csv(self) -> Path:
        return self.root / "eval" / "eval.csv"

    @property
    def ga_json(self) -> Path:
        return self.root / "analysis" / "ga.json"

    @property
    def report_csv(self) -> Path:
        return self.root / "report" / "report.csv"

    @property
    def report_json(self) -> Path:
        return self.root / "report" / "report.json"

    # sidecars
    def write_meta(self, path, **extra) -> None:
        meta = {"config_hash": self.config_hash, "seed": self.cfg.seed, "tool_version": __version__, **extra}
        sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    def require(self, path, producer: str) -> dict:
        """Check that ``path`` exists and was produced under this config; return its sidecar."""
        path = Path(path)
        meta_path = sidecar_path(path)
        if not path.exists() or not meta_path.exists():
            raise MissingArtifact(
                f"missing {path}; run `pap {producer}` first",
                artifact=str(path),
                producer=producer,
            )
        meta = json.loads(meta_path.read_text())
        if meta.get("config_hash") != self.config_hash and not self.force:
            raise HashMismatch(
                f"{path} was produced with config hash {meta.get('config_hash')}, "
                f"current config hash is {self.config_hash}; rerun `pap {producer}` or pass --force",
                artifact=str(path),
                expected=self.config_hash,
                found=meta.get("config_hash"),
            )
        return meta

    def load_source(self):
        self.require(self.dataset_manifest(self.cfg.source.name), "gen-data")
        return load_dataset(self.dataset_manifest(self.cfg.source.name))

    def load_downstream(self, name: str):
        self.require(self.dataset_manifest(name), "gen-data")
        return load_dataset(self.dataset_manifest(name))

    def load_pretrained(self) -> Model:
        self.require(self.pretrained, "pretrain")
        return load_checkpoint(self.pretrained)


def _mkdir(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# -- stages ----------------------------------------------------------------


def gen_data(ws: Workspace) -> list[Path]:
    out = []
    for spec in [ws.cfg.source] + ws.cfg.downstream:
        ds = generate_dataset(spec, ws.cfg.seed)
        manifest = save_dataset(ds, ws.dataset_manifest(spec.name).parent, ws.cfg.seed)
        ws.write_meta(manifest, stage="gen-data", dataset=spec.name)
        out.append(manifest)
        log.info("dataset %s: %d train / %d test", spec.name, len(ds.train_labels), len(ds.test_labels))
    return out


def run_pretrain(ws: Workspace) -> Path:
    src = ws.load_source()
    cfg = ws.cfg.pretrain
    classes = 4 if cfg.mode == "rotation" else src.spec.num_classes
    init = Model.init(classes, in_channels=src.spec.image_shape[0], image_size=src.spec.image_shape[1], seed=ws.cfg.seed)
    model, _ = pretrain(init, src, cfg)
    save_checkpoint(_mkdir(ws.pretrained), model)
    ws.write_meta(ws.pretrained, stage="pretrain", model_hash=model_hash(model))
    return ws.pretrained


def finetune_one(ws: Workspace, name: str) -> dict:
    model = ws.load_pretrained()
    ds = ws.load_downstream(name)
    result = finetune(model, ds, ws.cfg.finetune)
    path = _mkdir(ws.finetuned(name))
    save_checkpoint(path, result.model)
    drift = [float(v) for v in result.drift_curve[-1]] if result.drift_curve else [0.0] * NUM_BLOCKS
    ws.write_meta(path, stage="finetune", dataset=name, drift=drift, model_hash=model_hash(result.model))
    with open(ws.drift_csv(name), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch"] + [f"drift_{k}" for k in range(1, NUM_BLOCKS + 1)])
        for epoch, d in enumerate(result.drift_curve, 1):
            w.writerow([epoch] + [f"{v:.6f}" for v in d])
    ws.write_meta(ws.drift_csv(name), stage="finetune", dataset=name)
    return {"dataset": name, "drift": drift}


def attack_one(ws: Workspace, label: str) -> dict:
    cfg = ws.cfg.attack(label)
    model = ws.load_pretrained()
    src = ws.load_source()
    classifier = None
    if cfg.method in ("uap", "uapepgd"):
        # Decisions come from the backbone plus a linear head fitted on frozen source features.
        classifier = fit_linear_head(
            model, src.train_images, src.train_labels, src.spec.num_classes,
            epochs=ws.cfg.uap_head["epochs"], lr=ws.cfg.uap_head["lr"], seed=ws.cfg.seed,
        )
    mhash = model_hash(model)
    res = generate(model, src.train_images, cfg, classifier=classifier, model_hash=mhash)
    final = max(res.snapshots)
    path = _mkdir(ws.perturbation(label))
    save_tensor(path, res.perturbation.delta)
    for step, delta in sorted(res.snapshots.items()):
        if step != final:
            save_tensor(ws.perturbation(label, step), delta)
            ws.write_meta(ws.perturbation(label, step), stage="attack", label=label, step=step)
    ws.write_meta(
        path,
        stage="attack",
        label=label,
        method=cfg.method,
        epsilon=cfg.epsilon,
        steps=cfg.steps,
        attack_hash=cfg.hash(),
        snapshots=sorted(res.snapshots),
        final_step=final,
        skipped=res.skipped,
        model_hash=mhash,
    )
    if len(res.trace) >= 2:
        save_tensor(ws.trace(label), res.trace.as_array())
        ws.write_meta(ws.trace(label), stage="attack", label=label, method=cfg.method, steps=res.trace.steps, model_hash=mhash)
    return {"label": label, "snapshots": sorted(res.snapshots), "trace_len": len(res.trace)}


def _snapshot_paths(ws: Workspace, label: str) -> dict[int, Path]:
    meta = ws.require(ws.perturbation(label), "attack")
    final = meta["final_step"]
    out = {}
    for step in meta["snapshots"]:
        p = ws.perturbation(label) if step == final else ws.perturbation(label, step)
        ws.require(p, "attack")
        out[step] = p
    return out


def run_evaluate(ws: Workspace) -> Path:
    results = []
    models = {}
    for spec in ws.cfg.downstream:
        ws.require(ws.finetuned(spec.name), "finetune")
        models[spec.name] = (load_checkpoint(ws.finetuned(spec.name)), ws.load_downstream(spec.name))
    for cfg in ws.cfg.attacks:
        snaps = {step: load_tensor(p) for step, p in _snapshot_paths(ws, cfg.label).items()}
        for spec in ws.cfg.downstream:
            model, ds = models[spec.name]
            for step, delta in sorted(snaps.items()):
                results.append(evaluate(model, ds.test_images, ds.test_labels, delta, spec.name, cfg.label, step))
    write_eval_csv(_mkdir(ws.eval_csv), results)
    ws.write_meta(ws.eval_csv, stage="evaluate", rows=len(results))
    return ws.eval_csv


def load_trace(ws: Workspace, label: str) -> GradientTrace:
    meta = ws.require(ws.trace(label), "attack")
    arr = load_tensor(ws.trace(label))
    return GradientTrace(meta["method"], meta.get("model_hash", ""), steps=list(meta["steps"]), vectors=list(arr))


def run_analyze_ga(ws: Workspace) -> Path:
    ga = {}
    for cfg in ws.cfg.attacks:
        if cfg.method in ("pixel", "random"):
            continue
        ws.require(ws.perturbation(cfg.label), "attack")
        if not ws.trace(cfg.label).exists():
            log.warning("%s: fewer than two gradients recorded, no alignment value", cfg.label)
            continue
        ga[cfg.label] = ga_cosine(load_trace(ws, cfg.label))
    checks = None
    a = ws.cfg.analysis
    if a["checks"]:
        checks = {
            "theorem": theorem_check(num_trials=a["theorem_trials"], seed=ws.cfg.seed).record(),
            "lemma1": lemma1_check(num_trials=a["lemma1_trials"], seed=ws.cfg.seed).record(),
            "lemma2": lemma2_check(draws=a["lemma2_draws"], seed=ws.cfg.seed).record(),
        }
    write_analysis_json(_mkdir(ws.ga_json), ga, checks)
    ws.write_meta(ws.ga_json, stage="analyze-ga")
    return ws.ga_json


def run_report(ws: Workspace, extra_inputs=()) -> tuple[Path, Path]:
    inputs = [ws.eval_csv] + [Path(p) for p in extra_inputs]
    results = []
    for p in inputs:
        ws.require(p, "evaluate")
        results += read_eval_csv(p)
    table = build_report(results, [a.label for a in ws.cfg.attacks], [s.name for s in ws.cfg.downstream])
    if any(table.incomplete.values()):
        log.warning("report has missing cells: %s", [m for m, v in table.incomplete.items() if v])
    table.to_csv(_mkdir(ws.report_csv))
    table.to_json(ws.report_json)
    for p in (ws.report_csv, ws.report_json):
        ws.write_meta(p, stage="report", inputs=[str(i) for i in inputs])
    return ws.report_csv, ws.report_json


# -- pipeline ------------------------------------------------------------------


def _finetune_job(args):
    doc, seed, out, force, name = args
    ws = Workspace(RunConfig.from_dict(doc, seed, out), force)
    return finetune_one(ws, name)


def _attack_job(args):
    doc, seed, out, force, label = args
    ws = Workspace(RunConfig.from_dict(doc, seed, out), force)
    return attack_one(ws, label)


def _map(fn, jobs: int, items: list) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def run_finetune(ws: Workspace, jobs: int = 1, names=None) -> list[dict]:
    names = [s.name for s in ws.cfg.downstream] if names is None else list(names)
    for n in names:
        ws.cfg.dataset(n)
    args = [(ws.cfg.raw, ws.cfg.seed, str(ws.root), ws.force, n) for n in names]
    return _map(_finetune_job, jobs, args)


def run_attacks(ws: Workspace, jobs: int = 1, labels=None) -> list[dict]:
    labels = [a.label for a in ws.cfg.attacks] if labels is None else list(labels)
    for lab in labels:
        ws.cfg.attack(lab)
    args = [(ws.cfg.raw, ws.cfg.seed, str(ws.root), ws.force, lab) for lab in labels]
    return _map(_attack_job, jobs, args)


@dataclass
class PipelineSummary:
    output_dir: Path
    config_hash: str
    seed: int
    report: dict
    drift: dict[str, list[float]]
    ga: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "output_dir": str(self.output_dir),
            "config_hash": self.config_hash,
            "seed": self.seed,
            "report": self.report,
            "drift": self.drift,
            "ga": self.ga,
        }


def run_pipeline(cfg: RunConfig, jobs: int = 1, force: bool = False) -> PipelineSummary:
    """gen-data -> pretrain -> finetune -> attack -> evaluate -> analyze-ga -> report."""
    ws = Workspace(cfg, force)
    gen_data(ws)
    run_pretrain(ws)
    ft = run_finetune(ws, jobs)
    run_attacks(ws, jobs)
    run_evaluate(ws)
    run_analyze_ga(ws)
    run_report(ws)
    report = json.loads(ws.report_json.read_text())
    ga = json.loads(ws.ga_json.read_text())["ga"]
    return PipelineSummary(cfg.output_dir, ws.config_hash, cfg.seed, report, {r["dataset"]: r["drift"] for r in ft}, ga)
