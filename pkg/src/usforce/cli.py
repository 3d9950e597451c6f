"""Command-line entry point: synth, train, cv, eval, gradcam, stream.

Every command resolves a :class:`RunConfig` (built-in defaults, then an
optional ``key = value`` config file, then flags) and writes it to
``<out>/run_config.txt``; passing that file back via ``--config`` replays
the run.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as C
from . import data as D
from . import interpretability as I
from . import metrics
from . import model as M
from . import stream as S
from . import training as Tr

log = logging.getLogger("usforce")

RUN_CONFIG_NAME = "run_config.txt"
COMMANDS = ("synth", "train", "cv", "eval", "gradcam", "stream")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str = ""
    seed: int = 0
    out: str = "out"
    dataset: str = ""
    # synth
    subjects: int = 2
    image_size: int = 500
    frames_per_skill: int = D.FRAMES_PER_SKILL
    noise_level: float = 0.5
    peak_min: float = 1.0
    peak_max: float = 4.0
    # training
    task: str = "skill"
    subject: str = ""
    skill: int = -1
    epochs: int = 0
    lr: float = 0.0
    batch_size: int = 32
    folds: int = 5
    iterations_per_fold: int = 3
    fold_mode: str = "rotating"
    channels: tuple = M.DEFAULT_CHANNELS
    dense_units: int = 16
    dropout_p: float = 0.5
    with_bias: bool = True
    # eval / gradcam / stream
    checkpoint: str = ""
    models: str = ""
    frames: int = 10
    layer: str = ""
    guided: str = ""
    rate_hz: float = D.RATE_HZ
    single_force_model: str = ""

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.epochs == 0:
            self.epochs = Tr.TASK_DEFAULTS.get(self.task, {}).get("epochs", 0)
        if self.lr == 0.0:
            self.lr = Tr.TASK_DEFAULTS.get(self.task, {}).get("lr", 0.0)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def arch(self, image_size: int) -> M.ArchitectureConfig:
        return M.ArchitectureConfig(image_size, image_size, self.channels, self.dense_units,
                                    self.dropout_p, self.with_bias)

    def train_config(self) -> Tr.TrainConfig:
        return Tr.TrainConfig(self.task, self.epochs, self.lr, self.batch_size, self.folds,
                              self.iterations_per_fold, self.fold_mode, self.seed)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, text: str):
    default = _FIELDS[name].default
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{name}: expected a boolean, got {text!r}")
    try:
        if isinstance(default, tuple):
            return tuple(int(x) for x in text.split(",") if x.strip())
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise UsageError(f"{name}: cannot parse {text!r}") from None
    return text


def parse_config_file(path: str | Path) -> dict:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        values[key] = _coerce(key, val)
    return values


def resolve_config(ns: argparse.Namespace) -> RunConfig:
    values = {}
    if ns.config:
        values.update(parse_config_file(ns.config))
    for k, v in vars(ns).items():
        if k in _FIELDS and v is not None:
            values[k] = _coerce(k, v) if isinstance(v, str) and not isinstance(_FIELDS[k].default, str) else v
    values["command"] = ns.command
    return RunConfig(**values)


def write_run_config(cfg: RunConfig, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / RUN_CONFIG_NAME
    path.write_text(cfg.to_text())
    return path


# --- commands --------------------------------------------------------------

def _require_dataset(cfg: RunConfig) -> Path:
    if not cfg.dataset:
        raise UsageError("--dataset is required")
    root = Path(cfg.dataset)
    if not (root / D.MANIFEST_NAME).is_file():
        raise UsageError(f"no dataset at {root} (missing {D.MANIFEST_NAME})")
    return root


def _load(cfg: RunConfig, skills=None) -> D.Dataset:
    root = _require_dataset(cfg)
    subjects = [cfg.subject] if cfg.subject else None
    try:
        return D.load_dataset(root, subjects, skills)
    except (KeyError, FileNotFoundError) as exc:
        raise UsageError(f"dataset {root}: {exc}") from None


def cmd_synth(cfg: RunConfig) -> list[Path]:
    if cfg.subjects < 1:
        raise UsageError("--subjects must be at least 1")
    ds = D.synth_generate(cfg.subjects, (cfg.peak_min, cfg.peak_max), cfg.image_size,
                          cfg.noise_level, cfg.seed, cfg.frames_per_skill)
    out = Path(cfg.out)
    D.save_dataset(ds, out)
    write_run_config(cfg, out)
    loaded = D.load_manifest(out)
    if loaded.subjects != ds.manifest.subjects:
        raise RuntimeError("manifest did not round-trip")
    return [out / D.MANIFEST_NAME] + [out / r.subject / f"skill{r.skill}" / "frames.npy"
                                      for r in ds.recordings]


def _write_tables(ledger: Tr.ExperimentLedger, task: str, out: Path) -> list[Path]:
    written = []
    (out / "ledger.tsv").write_text(ledger.to_tsv())
    (out / "ledger_timing.tsv").write_text(ledger.timings_tsv())
    written += [out / "ledger.tsv", out / "ledger_timing.tsv"]
    pct = task == "force"
    groups = ["fold", "subject"] + (["skill"] if task == "force" else [])
    for g in groups:
        p = out / f"summary_by_{g}.tsv"
        p.write_text(metrics.summary_tsv(metrics.aggregate(ledger, g), with_percent=pct))
        written.append(p)
    p = out / "summary_overall.tsv"
    p.write_text(metrics.summary_tsv([metrics.overall(ledger)], with_percent=pct))
    written.append(p)
    return written


def _selected_skills(cfg: RunConfig) -> list[int]:
    if cfg.skill >= 0:
        if cfg.skill >= D.NUM_SKILLS:
            raise UsageError(f"--skill must be 0..{D.NUM_SKILLS - 1}")
        return [cfg.skill]
    return list(range(D.NUM_SKILLS))


def _checkpoint_name(task: str, skill: int | None, subject: str | None = None) -> str:
    stem = "skill" if task == "skill" else f"force_skill{skill}"
    return f"{subject}_{stem}.ckpt" if subject else f"{stem}.ckpt"


def cmd_train(cfg: RunConfig) -> list[Path]:
    """Fixed split (first 80 % train, last 20 % test) on the pooled subjects."""
    tc = cfg.train_config()
    skills = _selected_skills(cfg) if cfg.task == "force" else None
    ds = _load(cfg, skills)
    out = Path(cfg.out)
    write_run_config(cfg, out)
    arch = cfg.arch(ds.manifest.image_size)
    subject = cfg.subject or "all"
    groups = ([(None, ds.recordings)] if cfg.task == "skill"
              else [(k, [r for r in ds.recordings if r.skill == k]) for k in skills])
    ledger = Tr.ExperimentLedger()
    written = []
    for skill, recs in groups:
        x_tr, y_tr, x_te, y_te = Tr._gather(recs, 5, 0, "fixed", labels=cfg.task == "skill")
        seed = Tr.run_seed(cfg.seed, 0, skill, 0, 0)
        rng = np.random.Generator(np.random.PCG64(seed))
        params = M.build_model(arch, cfg.task, rng)
        params.seed = seed
        params, losses = Tr.train(params, x_tr, y_tr, tc, rng)
        ledger.add(Tr.LedgerRecord(cfg.task, subject, skill, 1, 1, Tr.evaluate(params, x_tr, y_tr),
                                   Tr.evaluate(params, x_te, y_te)))
        path = C.save(params, out / _checkpoint_name(cfg.task, skill))
        C.load(path)
        written.append(path)
        log.info("trained %s (skill=%s): losses %s", cfg.task, skill, [round(v, 4) for v in losses])
    return written + _write_tables(ledger, cfg.task, out)


def cmd_cv(cfg: RunConfig) -> list[Path]:
    tc = cfg.train_config()
    skills = _selected_skills(cfg) if cfg.task == "force" else None
    ds = _load(cfg, skills)
    out = Path(cfg.out)
    write_run_config(cfg, out)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    written = []

    def keep_first(rec, params):
        # One representative checkpoint per unit: fold 1, iteration 1.
        if rec.fold == 1 and rec.iteration == 1:
            written.append(C.save(params, ckpt_dir / _checkpoint_name(rec.task, rec.skill, rec.subject)))

    ledger = Tr.run_cross_validation(ds, tc, cfg.arch(ds.manifest.image_size), on_model=keep_first)
    n_subjects = len(ds.subjects)
    want = Tr.expected_records(cfg.task, n_subjects, tc.folds, tc.iterations_per_fold,
                               len(skills) if skills else D.NUM_SKILLS)
    if len(ledger) != want:
        raise RuntimeError(f"ledger has {len(ledger)} records, expected {want}")
    return written + _write_tables(ledger, cfg.task, out)


def _test_split(recs: Sequence[D.SkillRecording]):
    return Tr._gather(recs, 5, 0, "fixed", labels=False)


def cmd_eval(cfg: RunConfig) -> list[Path]:
    """Score a checkpoint on the last 20 % of every matching recording."""
    if not cfg.checkpoint:
        raise UsageError("--checkpoint is required")
    params = _load_checkpoint(cfg.checkpoint)
    skills = _selected_skills(cfg) if params.head == "force" else None
    ds = _load(cfg, skills)
    out = Path(cfg.out)
    write_run_config(cfg, out)
    rows = ["subject\tskill\tmetric\tvalue"]
    name = "accuracy_pct" if params.head == "skill" else "rmse_n"
    for r in ds.recordings:
        _, _, x_te, f_te = _test_split([r])
        y = np.full(len(x_te), r.skill) if params.head == "skill" else f_te
        rows.append(f"{r.subject}\t{r.skill}\t{name}\t{Tr.evaluate(params, x_te, y)!r}")
    path = out / "eval.tsv"
    path.write_text("\n".join(rows) + "\n")
    return [path]


def _load_checkpoint(path: str) -> M.ModelParameters:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return C.load(path)


def cmd_gradcam(cfg: RunConfig) -> list[Path]:
    """Overlays + NPY heatmaps for the first ``--frames`` test frames of one recording."""
    if not cfg.checkpoint:
        raise UsageError("--checkpoint is required")
    params = _load_checkpoint(cfg.checkpoint)
    skill = cfg.skill if cfg.skill >= 0 else 0
    ds = _load(cfg, [skill])
    if not ds.recordings:
        raise UsageError("no recording matches --subject/--skill")
    rec = ds.recordings[0]
    _, _, x_te, _ = _test_split([rec])
    x_te = x_te[:cfg.frames]
    out = Path(cfg.out)
    write_run_config(cfg, out)
    (out / "overlays").mkdir(exist_ok=True)
    (out / "heatmaps").mkdir(exist_ok=True)
    written = []
    for i, frame in enumerate(x_te):
        if cfg.guided:
            sal = np.abs(I.guided_backprop(params, frame, cfg.guided)[..., 0]).astype(np.float64)
            hm = I.Heatmap(I.max_normalize(sal), ("input",), True)
        elif cfg.layer:
            hm = I.gradcam(params, frame, cfg.layer, normalize=True)
        else:
            hm = I.weighted_multilayer_gradcam(params, frame, skill=rec.skill)
        written.append(I.export_overlay(frame, hm, out / "overlays" / f"frame_{i:05d}.png"))
        hp = out / "heatmaps" / f"frame_{i:05d}.npy"
        I.save_heatmap(hp, hm)
        written.append(hp)
    return written


def cmd_stream(cfg: RunConfig) -> list[Path]:
    if not cfg.models:
        raise UsageError("--models <dir with skill.ckpt and force_skill<k>.ckpt> is required")
    mdir = Path(cfg.models)
    skill_model = _load_checkpoint(str(mdir / _checkpoint_name("skill", None)))
    if cfg.single_force_model:
        force = _load_checkpoint(cfg.single_force_model)
    else:
        force = {k: _load_checkpoint(str(mdir / _checkpoint_name("force", k))) for k in range(D.NUM_SKILLS)}
    ds = _load(cfg)
    subject = cfg.subject or ds.subjects[0]
    recs = ds.for_subject(subject)
    per = -(-cfg.frames // len(recs))
    frames, truth = [], []
    for r in recs:
        _, _, x_te, f_te = _test_split([r])
        frames.extend(x_te[:per])
        truth.extend(f_te[:per])
    frames, truth = frames[:cfg.frames], truth[:cfg.frames]
    out = Path(cfg.out)
    write_run_config(cfg, out)
    report = S.run_stream(skill_model, force, frames, truth, cfg.rate_hz)
    path = out / "stream_report.json"
    path.write_text(report.to_json())
    print(report.summary_text())
    return [path]


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "cv": cmd_cv, "eval": cmd_eval,
            "gradcam": cmd_gradcam, "stream": cmd_stream}


# --- argument parsing ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--config", help="key = value file; flags override it")
    common.add_argument("--out", help="output directory")
    common.add_argument("--dataset", help="dataset root")
    common.add_argument("-v", "--verbose", action="store_true")

    arch = argparse.ArgumentParser(add_help=False)
    arch.add_argument("--channels", help="comma-separated conv widths, e.g. 16,16,16,16,16")
    arch.add_argument("--dense-units", dest="dense_units", type=int)
    arch.add_argument("--dropout-p", dest="dropout_p", type=float)

    train = argparse.ArgumentParser(add_help=False)
    train.add_argument("--task", choices=("skill", "force"))
    train.add_argument("--subject")
    train.add_argument("--skill", type=int)
    train.add_argument("--epochs", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--batch-size", dest="batch_size", type=int)
    train.add_argument("--folds", type=int)
    train.add_argument("--iterations-per-fold", dest="iterations_per_fold", type=int)
    train.add_argument("--fold-mode", dest="fold_mode", choices=("rotating", "fixed"))

    parser = argparse.ArgumentParser(prog="usforce", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", parents=[common], help="generate a phantom dataset")
    p.add_argument("--subjects", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--frames-per-skill", dest="frames_per_skill", type=int)
    p.add_argument("--noise-level", dest="noise_level", type=float)
    p.add_argument("--peak-min", dest="peak_min", type=float)
    p.add_argument("--peak-max", dest="peak_max", type=float)
    sub.add_parser("train", parents=[common, arch, train], help="train on the fixed 80/20 split")
    sub.add_parser("cv", parents=[common, arch, train], help="cross-validate and write the ledger")
    p = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--subject")
    p.add_argument("--skill", type=int)
    p = sub.add_parser("gradcam", parents=[common], help="heatmaps and overlay frames")
    p.add_argument("--checkpoint")
    p.add_argument("--subject")
    p.add_argument("--skill", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--layer", help="single layer (conv1..conv5) instead of the weighted blend")
    p.add_argument("--guided", choices=("standard", "literal"), help="guided backprop saliency instead")
    p = sub.add_parser("stream", parents=[common], help="paced replay with latency report")
    p.add_argument("--models", help="directory with skill.ckpt and force_skill<k>.ckpt")
    p.add_argument("--subject")
    p.add_argument("--frames", type=int)
    p.add_argument("--rate-hz", dest="rate_hz", type=float)
    p.add_argument("--single-force-model", dest="single_force_model",
                   help="one force checkpoint for every skill instead of routing")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(ns)
        outputs = HANDLERS[cfg.command](cfg)
    except UsageError as exc:
        print(f"usforce {ns.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError, C.CheckpointError) as exc:
        print(f"usforce {ns.command}: failed: {exc}", file=sys.stderr)
        return 1
    missing = [str(p) for p in outputs if not Path(p).exists()]
    if missing:
        print(f"usforce {ns.command}: missing outputs: {', '.join(missing)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
