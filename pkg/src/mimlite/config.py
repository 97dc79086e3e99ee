"""TOML experiment configs: parsing, overrides, validation and sweeps."""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import DatasetError, DatasetSpec
from .distill import ATTENTION_KINDS, TARGET_KINDS, DistillConfig
from .mae import DecoderConfig
from .pretrain import PretrainConfig
from .train_eval import ProbeRecipe, Recipe
from .vit import PRESETS, ConfigError, ModelConfig

SCHEMA_VERSION = 1
SECTIONS = ("model", "data", "pretrain", "distill", "finetune", "probe", "analyze", "output")
TOP_LEVEL = ("schema_version", "seed", "name", "sweep")
# stage inputs that name another stage's output instead of a checkpoint path
INIT_KEYWORDS = ("pretrain", "scratch")


def _err(section: str | None, key: str | None, msg: str) -> ConfigError:
    where = f"[{section}]" if section else "<top level>"
    if key:
        where += f" {key}"
    return ConfigError(f"{where}: {msg}")


def _check_value(section: str, key: str, value: Any, default: Any) -> Any:
    """Type-check ``value`` against the kind of ``default``; lists become tuples."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise _err(section, key, f"expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise _err(section, key, f"expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise _err(section, key, f"expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise _err(section, key, f"expected a list of {len(default)} numbers, got {value!r}")
        value = tuple(_check_value(section, key, v, d) for v, d in zip(value, default))
    elif isinstance(default, str) or default is None:
        if value is not None and not isinstance(value, str):
            raise _err(section, key, f"expected a string, got {value!r}")
    return value


def _build(cls, section: str, values: dict):
    """Instantiate dataclass ``cls`` from a section dict with per-key errors."""
    defaults = _defaults(cls)
    kwargs = {}
    for key, value in values.items():
        if key not in defaults:
            raise _err(section, key, f"unknown key (allowed: {', '.join(sorted(defaults))})")
        kwargs[key] = _check_value(section, key, value, defaults.get(key))
    try:
        return cls(**kwargs)
    except (ConfigError, DatasetError, TypeError, ValueError) as e:
        raise _err(section, None, str(e)) from None


def _defaults(cls) -> dict:
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in fields(cls)}


@dataclass
class PretrainSection:
    config: PretrainConfig
    decoder: DecoderConfig


@dataclass
class DistillSection:
    enabled: bool
    config: DistillConfig
    teacher_checkpoint: str


@dataclass
class StageInit:
    """Where a finetune/probe/analyze stage takes its weights from."""

    source: str  # "pretrain", "scratch" or a checkpoint path

    @property
    def is_path(self) -> bool:
        return self.source not in INIT_KEYWORDS


@dataclass
class AnalyzeSection:
    model: StageInit
    compare: StageInit | None = None
    cka: bool = True
    attention: bool = True
    num_images: int = 512
    batch_size: int = 64
    num_batches: int = 16
    mode: str = "example"
    reserve_k: tuple[int, ...] = ()


@dataclass
class OutputSection:
    dir: str | None = None
    checkpoints: bool = True
    plots: bool = True


@dataclass
class ExperimentConfig:
    schema_version: int
    seed: int
    name: str
    model: ModelConfig
    data: DatasetSpec
    data_seed: int
    pretrain: PretrainSection | None = None
    distill: DistillSection | None = None
    finetune: tuple[Recipe, StageInit] | None = None
    probe: tuple[ProbeRecipe, StageInit] | None = None
    analyze: AnalyzeSection | None = None
    output: OutputSection = field(default_factory=OutputSection)
    sweep: list[dict] = field(default_factory=list)
    raw: dict = field(default_factory=dict)

    @property
    def stages(self) -> list[str]:
        """Declared stages in execution order."""
        out = []
        if self.pretrain is not None:
            out.append("distill" if self.distill is not None and self.distill.enabled else "pretrain")
        if self.analyze is not None:
            out.append("analyze")
        if self.finetune is not None:
            out.append("finetune")
        if self.probe is not None:
            out.append("probe")
        return out


def _model_config(section: dict, num_classes: int) -> ModelConfig:
    section = dict(section)
    preset = section.pop("preset", "vit_toy")
    if preset not in PRESETS:
        raise _err("model", "preset", f"unknown preset {preset!r} (choose from {sorted(PRESETS)})")
    base = PRESETS[preset]().to_dict()
    base["num_classes"] = num_classes
    for key, value in section.items():
        if key not in base:
            raise _err("model", key, f"unknown key (allowed: preset, {', '.join(sorted(base))})")
        base[key] = _check_value("model", key, value, base[key])
    try:
        return ModelConfig(**base)
    except ConfigError as e:
        raise _err("model", None, str(e)) from None


def _init(section: str, value: Any, default: str) -> StageInit:
    value = default if value is None else value
    if not isinstance(value, str):
        raise _err(section, "init", f"expected 'pretrain', 'scratch' or a checkpoint path, got {value!r}")
    return StageInit(value)


def from_dict(raw: dict, base_dir: str | os.PathLike = ".", check_paths: bool = True) -> ExperimentConfig:
    """Validate a parsed config. Errors name the offending section and key."""
    raw = copy.deepcopy(raw)
    for key in raw:
        if key not in SECTIONS and key not in TOP_LEVEL:
            raise _err(None, key, f"unknown section or key (sections: {', '.join(SECTIONS)})")
        if key in SECTIONS and not isinstance(raw[key], dict):
            raise _err(key, None, "must be a table")
    version = raw.get("schema_version")
    if version is None:
        raise _err(None, "schema_version", "missing")
    if version != SCHEMA_VERSION:
        raise _err(None, "schema_version", f"unsupported version {version!r} (supported: {SCHEMA_VERSION})")
    seed = _check_value("", "seed", raw.get("seed", 0), 0)
    name = _check_value("", "name", raw.get("name", "experiment"), "")
    base_dir = Path(base_dir)

    def resolve(p: str) -> str:
        return str(p if Path(p).is_absolute() else (base_dir / p))

    data_raw = dict(raw.get("data", {}))
    data_seed = _check_value("data", "seed", data_raw.pop("seed", 0), 0)
    if data_raw.get("root"):
        data_raw["root"] = resolve(data_raw["root"])
    data = _build(DatasetSpec, "data", data_raw)
    if check_paths and data.kind == "image_directory" and not Path(data.root).is_dir():
        raise _err("data", "root", f"directory {data.root} does not exist")
    model = _model_config(raw.get("model", {}), data.num_classes)
    if model.image_size != data.image_size:
        raise _err("model", "image_size", f"{model.image_size} differs from [data] image_size {data.image_size}")

    pre = None
    if "pretrain" in raw:
        p = dict(raw["pretrain"])
        dec_keys = {"decoder_depth": "depth", "decoder_embed_dim": "embed_dim", "decoder_num_heads": "num_heads", "decoder_mlp_ratio": "mlp_ratio"}
        dec_defaults = _defaults(DecoderConfig)
        dec = {}
        for k, dk in dec_keys.items():
            if k in p:
                dec[dk] = _check_value("pretrain", k, p.pop(k), dec_defaults[dk])
        p.setdefault("seed", seed)
        try:
            decoder = DecoderConfig(**dec)
        except ConfigError as e:
            raise _err("pretrain", "decoder", str(e)) from None
        pre = PretrainSection(_build(PretrainConfig, "pretrain", p), decoder)

    dist = None
    if "distill" in raw:
        d = dict(raw["distill"])
        enabled = _check_value("distill", "enabled", d.pop("enabled", True), True)
        teacher = d.pop("teacher_checkpoint_path", None)
        if "lambda" in d:
            d["loss_weight"] = _check_value("distill", "lambda", d.pop("lambda"), 1.0)
        for k in ("teacher_layer", "student_layer", "attach_layer"):
            d.setdefault(k, model.depth)
        if d.get("target_kind", "attention") not in TARGET_KINDS:
            raise _err("distill", "target_kind", f"must be one of {TARGET_KINDS}")
        if d.get("attention_kind", "scores") not in ATTENTION_KINDS:
            raise _err("distill", "attention_kind", f"must be one of {ATTENTION_KINDS}")
        cfg = _build(DistillConfig, "distill", d)
        if cfg.student_layer > model.depth or cfg.attach_layer > model.depth:
            raise _err("distill", "attach_layer", f"layer indices must be within 1..{model.depth}")
        if enabled:
            if pre is None:
                raise _err("distill", None, "distillation runs during pre-training; add a [pretrain] section")
            if not teacher:
                raise _err("distill", "teacher_checkpoint_path", "required when distillation is enabled")
            teacher = resolve(teacher)
            if check_paths and not Path(teacher).is_file():
                raise _err("distill", "teacher_checkpoint_path", f"file {teacher} does not exist")
        dist = DistillSection(enabled, cfg, teacher or "")

    default_init = "pretrain" if pre is not None else "scratch"

    def stage_init(section: str, value) -> StageInit:
        init = _init(section, value, default_init)
        if init.source == "pretrain" and pre is None:
            raise _err(section, "init", "'pretrain' needs a [pretrain] section in the same config")
        if init.is_path:
            init = StageInit(resolve(init.source))
            if check_paths and not Path(init.source).is_file():
                raise _err(section, "init", f"checkpoint {init.source} does not exist")
        return init

    ft = None
    if "finetune" in raw:
        f = dict(raw["finetune"])
        init = stage_init("finetune", f.pop("init", None))
        f.setdefault("seed", seed)
        ft = (_build(Recipe, "finetune", f), init)

    pr = None
    if "probe" in raw:
        f = dict(raw["probe"])
        init = stage_init("probe", f.pop("init", None))
        f.setdefault("seed", seed)
        pr = (_build(ProbeRecipe, "probe", f), init)

    an = None
    if "analyze" in raw:
        a = dict(raw["analyze"])
        init = stage_init("analyze", a.pop("model", None))
        compare = a.pop("compare", None)
        compare = stage_init("analyze", compare) if compare is not None else None
        defaults = {"cka": True, "attention": True, "num_images": 512, "batch_size": 64, "num_batches": 16, "mode": "example"}
        kwargs = {}
        for k, v in a.items():
            if k == "reserve_k":
                if not isinstance(v, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in v):
                    raise _err("analyze", k, "expected a list of integers")
                if any(not 0 <= i <= model.depth for i in v):
                    raise _err("analyze", k, f"values must lie in 0..{model.depth}")
                kwargs[k] = tuple(v)
            elif k in defaults:
                kwargs[k] = _check_value("analyze", k, v, defaults[k])
            else:
                raise _err("analyze", k, f"unknown key (allowed: model, compare, reserve_k, {', '.join(defaults)})")
        if kwargs.get("mode", "example") not in ("example", "token"):
            raise _err("analyze", "mode", "must be 'example' or 'token'")
        if kwargs.get("batch_size", 64) < 4:
            raise _err("analyze", "batch_size", "CKA batches need at least 4 images")
        an = AnalyzeSection(init, compare, **kwargs)

    out_raw = dict(raw.get("output", {}))
    output = OutputSection()
    for k, v in out_raw.items():
        if k not in ("dir", "checkpoints", "plots"):
            raise _err("output", k, "unknown key (allowed: checkpoints, dir, plots)")
        setattr(output, k, _check_value("output", k, v, getattr(OutputSection(), k) if k != "dir" else ""))

    sweep = raw.get("sweep", [])
    if not isinstance(sweep, list) or not all(isinstance(s, dict) for s in sweep):
        raise _err(None, "sweep", "expected an array of tables ([[sweep]])")

    return ExperimentConfig(
        schema_version=version,
        seed=seed,
        name=name,
        model=model,
        data=data,
        data_seed=data_seed,
        pretrain=pre,
        distill=dist,
        finetune=ft,
        probe=pr,
        analyze=an,
        output=output,
        sweep=sweep,
        raw=raw,
    )


def parse_value(text: str) -> Any:
    """TOML literal if it parses (numbers, booleans, lists, quoted strings), else the bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str] | dict) -> dict:
    """Apply ``section.key=value`` overrides (or an equivalent dict) to a raw config."""
    raw = copy.deepcopy(raw)
    items = overrides.items() if isinstance(overrides, dict) else []
    if not isinstance(overrides, dict):
        parsed = []
        for o in overrides:
            if "=" not in o:
                raise ConfigError(f"override {o!r} is not of the form section.key=value")
            k, v = o.split("=", 1)
            parsed.append((k.strip(), parse_value(v.strip())))
        items = parsed
    for dotted, value in items:
        parts = dotted.split(".")
        if len(parts) == 1:
            if parts[0] not in TOP_LEVEL:
                raise ConfigError(f"override {dotted!r}: unknown top-level key")
            raw[parts[0]] = value
        elif len(parts) == 2:
            section, key = parts
            if section not in SECTIONS:
                raise ConfigError(f"override {dotted!r}: unknown section [{section}]")
            raw.setdefault(section, {})[key] = value
        else:
            raise ConfigError(f"override {dotted!r}: expected section.key")
    return raw


def read_raw(path: str | os.PathLike) -> dict:
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: TOML syntax error: {e}") from None


def load_config(path: str | os.PathLike, overrides: list[str] | None = None, check_paths: bool = True) -> ExperimentConfig:
    """Read, override and validate; relative paths resolve against the config's directory."""
    raw = apply_overrides(read_raw(path), overrides or [])
    return from_dict(raw, base_dir=Path(path).parent, check_paths=check_paths)


def sweep_configs(cfg: ExperimentConfig, base_dir: str | os.PathLike = ".", check_paths: bool = True) -> list[tuple[str, ExperimentConfig]]:
    """Expand ``[[sweep]]`` entries into named child configs (one per entry)."""
    out = []
    for i, entry in enumerate(cfg.sweep):
        entry = dict(entry)
        name = str(entry.pop("name", f"sweep_{i:02d}"))
        raw = {k: v for k, v in cfg.raw.items() if k != "sweep"}
        raw = apply_overrides(raw, entry)
        out.append((name, from_dict(raw, base_dir=base_dir, check_paths=check_paths)))
    names = [n for n, _ in out]
    if len(set(names)) != len(names):
        raise _err(None, "sweep", f"duplicate sweep names {names}")
    return out
