"""Command-line entry point: ``mimlite pretrain|distill|finetune|probe|analyze|run``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import __version__
from .analysis import attention_stats, layer_similarity_matrix, reserve_leading_blocks
from .checkpoint import CheckpointError, ShapeMismatchError, load_checkpoint, load_into, load_model, loss_digest, save_checkpoint
from .config import ExperimentConfig, StageInit, load_config, sweep_configs
from .data import DatasetSpec, Splits, ingest_dataset
from .distill import Distiller, freeze
from .mae import MaskedAutoencoder
from .pretrain import run_pretraining
from .report import Manifest, emit_report, write_csv, write_json
from .train_eval import finetune, linear_probe
from .vit import ConfigError, ModelConfig, VisionTransformer, build_model

log = logging.getLogger("mimlite")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3
LOSS_COLUMNS = ("step", "recon_loss", "distill_loss", "total")
FINETUNE_COLUMNS = ("epoch", "lr", "train_loss", "eval_top1")
PRETRAIN_CKPT = "checkpoints/pretrain.ckpt"


class StageError(RuntimeError):
    def __init__(self, stage: str, step, cause: BaseException):
        self.stage, self.step, self.cause = stage, step, cause
        where = f"stage '{stage}'" + (f" at step {step}" if step is not None else "")
        super().__init__(f"{where} failed: {type(cause).__name__}: {cause}")


class Run:
    """State shared by the stages of one experiment in one output directory."""

    def __init__(self, cfg: ExperimentConfig, out: Path, command: str):
        self.cfg = cfg
        self.out = out
        self.manifest = Manifest(out, {"name": cfg.name, "seed": cfg.seed, "command": command, "config": _jsonable(cfg.raw)})
        self._data: Splits | None = None
        self.step = None

    @property
    def data(self) -> Splits:
        if self._data is None:
            self._data = ingest_dataset(self.cfg.data, self.cfg.data_seed)
            if self._data.skipped:
                log.warning("skipped %d undecodable files", len(self._data.skipped))
        return self._data

    @property
    def model_config(self) -> ModelConfig:
        return replace(self.cfg.model, num_classes=len(self.data.classes))

    def checkpoint(self, rel: str, model: torch.nn.Module, meta: dict) -> None:
        if not self.cfg.output.checkpoints:
            return
        meta = {"config": self.model_config.to_dict() if isinstance(model, VisionTransformer) else None, **meta}
        self.manifest.add(save_checkpoint(self.out / rel, model, meta), "checkpoint")

    def resolve_model(self, init: StageInit, seed: int, stage: str) -> VisionTransformer:
        """Model for a downstream stage; pre-trained heads are always re-initialized."""
        cfg = self.model_config
        if init.source == "scratch":
            return build_model(cfg, seed)
        path = self.out / PRETRAIN_CKPT if init.source == "pretrain" else Path(init.source)
        if not path.is_file():
            raise ConfigError(f"[{stage}] init: checkpoint {path} does not exist (run the pretrain stage first)")
        state, meta = load_checkpoint(path)
        if meta.get("config"):
            stored = ModelConfig.from_dict(meta["config"])
            cfg = replace(stored, num_classes=len(self.data.classes))
        return load_into(build_model(cfg, seed), state, ignore=("head.",))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


class _CsvLog:
    """Append rows as they arrive so a crashed run still leaves its losses."""

    def __init__(self, path: Path, columns):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.f = open(path, "w", newline="")
        self.columns = columns
        self.w = csv.writer(self.f, lineterminator="\n")
        self.w.writerow(columns)

    def __call__(self, row: dict) -> None:
        self.w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in self.columns])

    def close(self):
        self.f.close()


def stage_pretrain(run: Run, distill: bool) -> None:
    cfg = run.cfg
    sec = cfg.pretrain
    if sec is None:
        raise ConfigError("[pretrain]: section required for this command")
    pc = sec.config
    mcfg = run.model_config
    encoder = build_model(mcfg, pc.seed)
    teacher = distiller = None
    attach = None
    if distill:
        if cfg.distill is None or not cfg.distill.enabled:
            raise ConfigError("[distill]: an enabled [distill] section is required for this command")
        dcfg = cfg.distill.config
        teacher, _ = load_model(cfg.distill.teacher_checkpoint)
        freeze(teacher)
        distiller = Distiller(dcfg, teacher, encoder, pc.seed)
        attach = dcfg.attach_layer
    mae = MaskedAutoencoder(encoder, sec.decoder, attach_layer=attach, seed=pc.seed)
    log_path = run.out / "pretrain_losses.csv"
    csv_log = _CsvLog(log_path, LOSS_COLUMNS)
    history: list[dict] = []

    def on_step(row):
        run.step = row["step"]
        csv_log(row)
        history.append(row)

    try:
        run_pretraining(mae, run.data.train.images, pc, teacher=teacher, distiller=distiller, on_step=on_step)
    finally:
        csv_log.close()
        run.manifest.add(log_path, "metrics")
    meta = {
        "stage": "distill" if distill else "pretrain",
        "seed": pc.seed,
        "step": len(history),
        "loss_digest": loss_digest(history),
        "pretrain": _jsonable(pc.to_dict()),
    }
    if distill:
        meta["distill"] = _jsonable(cfg.distill.config.to_dict())
    run.checkpoint(PRETRAIN_CKPT, encoder, meta)
    summary = {"steps": len(history), "final": history[-1] if history else None, "stage": meta["stage"]}
    run.manifest.add(write_json(run.out / "pretrain_summary.json", summary), "summary")


def stage_finetune(run: Run) -> None:
    recipe, init = run.cfg.finetune
    model = run.resolve_model(init, recipe.seed, "finetune")
    result = finetune(model, run.data, recipe, on_epoch=lambda r: setattr(run, "step", r["epoch"]))
    run.manifest.add(write_csv(run.out / "finetune_metrics.csv", result.curves, FINETUNE_COLUMNS), "metrics")
    summary = {
        "init": init.source,
        "final_top1": result.final_top1,
        "best_top1": result.best_top1,
        "init_top1": result.init_top1,
        "epochs": recipe.epochs,
    }
    run.manifest.add(write_json(run.out / "finetune_summary.json", summary), "summary")
    run.checkpoint("checkpoints/finetune.ckpt", model, {"stage": "finetune", "seed": recipe.seed, "step": recipe.epochs})


def stage_probe(run: Run) -> None:
    recipe, init = run.cfg.probe
    model = run.resolve_model(init, recipe.seed, "probe")
    result = linear_probe(model, run.data, recipe)
    run.manifest.add(write_csv(run.out / "probe_metrics.csv", result.curves, ("epoch", "train_loss")), "metrics")
    summary = {"init": init.source, "top1": result.top1, "train_top1": result.train_top1, "epochs": recipe.epochs}
    run.manifest.add(write_json(run.out / "probe_summary.json", summary), "summary")


def stage_analyze(run: Run) -> None:
    sec = run.cfg.analyze
    seed = run.cfg.seed
    images = run.data.eval.images[: sec.num_images]
    model_a = run.resolve_model(sec.model, seed, "analyze")
    name_a = Path(sec.model.source).stem if sec.model.is_path else sec.model.source
    models = [(name_a, model_a)]
    if sec.compare is not None:
        name_b = Path(sec.compare.source).stem if sec.compare.is_path else sec.compare.source
        if name_b == name_a:
            name_b += "_b"
        models.append((name_b, run.resolve_model(sec.compare, seed, "analyze")))
    sims, atts = [], []
    if sec.cka:
        (na, ma), (nb, mb) = models[0], models[-1]
        sims.append(layer_similarity_matrix(ma, mb, images, sec.batch_size, sec.num_batches, sec.mode, (na, nb)))
    if sec.attention:
        atts = [attention_stats(m, images, sec.batch_size, n) for n, m in models]
    emit_report(run.out, sims, atts, plots=run.cfg.output.plots, manifest=run.manifest)
    for k in sec.reserve_k:
        reserved = reserve_leading_blocks(model_a, k, seed=seed)
        run.checkpoint(f"checkpoints/reserve_k{k}.ckpt", reserved, {"stage": "reserve", "seed": seed, "step": 0, "reserved_blocks": k})


STAGES = {
    "pretrain": lambda run: stage_pretrain(run, distill=False),
    "distill": lambda run: stage_pretrain(run, distill=True),
    "analyze": stage_analyze,
    "finetune": stage_finetune,
    "probe": stage_probe,
}


def run_stages(cfg: ExperimentConfig, out: Path, stages: list[str], command: str) -> Manifest:
    out.mkdir(parents=True, exist_ok=True)
    run = Run(cfg, out, command)
    for stage in stages:
        run.step = None
        log.info("stage %s", stage)
        try:
            STAGES[stage](run)
        except ConfigError:
            raise
        except Exception as e:  # noqa: BLE001 - every stage failure maps to one exit code
            raise StageError(stage, run.step, e) from e
    run.manifest.write()
    return run.manifest


def run_experiment(config_path: str | Path, out: str | Path | None = None, overrides: list[str] | None = None) -> Path:
    """Execute every declared stage (and sweep entry); returns the output directory."""
    cfg = load_config(config_path, overrides)
    out_dir = Path(out or cfg.output.dir or "")
    if not str(out_dir):
        raise ConfigError("[output] dir: no output directory given (use --out)")
    if cfg.sweep:
        top = Manifest(out_dir, {"name": cfg.name, "sweep": [n for n, _ in sweep_configs(cfg, Path(config_path).parent)]})
        for name, child in sweep_configs(cfg, Path(config_path).parent):
            sub = run_stages(child, out_dir / name, child.stages, "run")
            top.extend(sub, prefix=f"{name}/")
            top.entries[f"{name}/manifest.json"] = "manifest"
        top.write()
    else:
        run_stages(cfg, out_dir, cfg.stages, "run")
    return out_dir


def _analyze_adhoc(args) -> Path:
    """``analyze cka|attention|reserve`` driven by flags instead of a config."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest(out, {"command": f"analyze {args.analysis}"})
    if args.analysis == "reserve":
        state, meta = load_checkpoint(args.ckpt)
        if not meta.get("config"):
            raise ConfigError(f"{args.ckpt}: no stored model config")
        cfg = ModelConfig.from_dict(meta["config"])
        if not 0 <= args.k <= cfg.depth:
            raise ConfigError(f"--k must lie in 0..{cfg.depth}, got {args.k}")
        model = reserve_leading_blocks(state, args.k, cfg, seed=args.seed)
        path = save_checkpoint(out / f"reserve_k{args.k}.ckpt", model, {"config": cfg.to_dict(), "seed": args.seed, "step": 0, "reserved_blocks": args.k})
        man.add(path, "checkpoint")
        man.write()
        return out
    if not Path(args.data).is_dir():
        raise ConfigError(f"--data {args.data} is not a directory")
    paths = [args.model_a, args.model_b] if args.analysis == "cka" else [args.model]
    models = [load_model(p)[0] for p in paths]
    size = models[0].config.image_size
    data = ingest_dataset(DatasetSpec(kind="image_directory", root=args.data, image_size=size), args.seed)
    images = torch.cat([data.train.images, data.eval.images])[: args.num_images]
    names = [Path(p).stem for p in paths]
    if len(names) == 2 and names[0] == names[1]:
        names[1] += "_b"
    if args.analysis == "cka":
        sim = layer_similarity_matrix(models[0], models[1], images, args.batch_size, args.num_batches, args.mode, tuple(names))
        emit_report(out, sim, None, manifest=man)
    else:
        emit_report(out, None, attention_stats(models[0], images, args.batch_size, names[0]), manifest=man)
    man.write()
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mimlite", description="Masked image modeling and distillation for small ViTs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="TOML experiment config")
        p.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config value (repeatable)")
        p.add_argument("--out", help="output directory (defaults to [output] dir)")

    for name, help_text in (
        ("pretrain", "MAE pre-training"),
        ("distill", "MAE pre-training with distillation from a frozen teacher"),
        ("finetune", "fine-tune all layers on the labeled split"),
        ("probe", "linear probe on frozen features"),
        ("run", "every stage declared in the config, plus sweeps"),
    ):
        common(sub.add_parser(name, help=help_text))

    an = sub.add_parser("analyze", help="CKA / attention analysis and reserved-block initialization")
    common(an, config_required=False)
    an.add_argument("analysis", nargs="?", choices=("cka", "attention", "reserve"), help="run one analysis from flags instead of a config")
    an.add_argument("--model-a")
    an.add_argument("--model-b")
    an.add_argument("--model")
    an.add_argument("--data", help="image directory (one subdirectory per class)")
    an.add_argument("--ckpt")
    an.add_argument("--k", type=int)
    an.add_argument("--seed", type=int, default=0)
    an.add_argument("--num-images", type=int, default=512)
    an.add_argument("--batch-size", type=int, default=64)
    an.add_argument("--num-batches", type=int, default=16)
    an.add_argument("--mode", choices=("example", "token"), default="example")
    return parser


_REQUIRED_FLAGS = {"cka": ("model_a", "model_b", "data"), "attention": ("model", "data"), "reserve": ("ckpt", "k")}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "analyze" and args.analysis:
            missing = [f"--{f.replace('_', '-')}" for f in _REQUIRED_FLAGS[args.analysis] if getattr(args, f) is None]
            if missing or not args.out:
                raise ConfigError(f"analyze {args.analysis} needs {' '.join(missing + ([] if args.out else ['--out']))}")
            try:
                out = _analyze_adhoc(args)
            except (ConfigError, CheckpointError, ShapeMismatchError):
                raise
            except Exception as e:  # noqa: BLE001
                raise StageError("analyze", None, e) from e
        elif args.command == "run":
            out = run_experiment(args.config, args.out, args.override)
        else:
            if not args.config:
                raise ConfigError("--config is required")
            cfg = load_config(args.config, args.override)
            out = Path(args.out or cfg.output.dir or "")
            if not str(out):
                raise ConfigError("[output] dir: no output directory given (use --out)")
            section = "pretrain" if args.command == "distill" else args.command
            if getattr(cfg, section) is None:
                raise ConfigError(f"[{section}]: section required for `mimlite {args.command}`")
            run_stages(cfg, out, [args.command], args.command)
    except (ConfigError, CheckpointError, ShapeMismatchError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
