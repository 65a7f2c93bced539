"""Run configuration: a TOML file with one section per hyperparameter table.

Sections::

    [run]        name, seed, output_dir, init_checkpoint
    [model]      MultiwayConfig fields
    [data]       corpus root and file names
    [pretrain]   steps, quotas and optimizer settings
    [masking]    mask ratios and block-mask constants
    [finetune.<task>]   one section per downstream task

``MWT_SEED`` in the environment overrides ``run.seed``.
"""
from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import tomli_w

from .mdm import MaskSettings
from .multiway import ConfigError, MultiwayConfig
from .repurpose import FinetuneConfig
from .training import OptimConfig, PretrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SEED_ENV = "MWT_SEED"
TASKS = ("fusion-cls", "two-pair-cls", "retrieval", "caption", "classify")


@dataclass
class DataConfig:
    root: str = "data"
    texts: str = "texts.txt"
    images: str = "images.txt"
    pairs: str = "pairs.tsv"
    vqa: str = "vqa.tsv"
    nlvr: str = "nlvr.tsv"
    classify: str = "classify.tsv"
    labels: str = "labels.txt"
    captions: str = "captions.tsv"
    codebook_seed: int = 1

    def path(self, key, base=None) -> Path:
        root = Path(self.root)
        if base is not None and not root.is_absolute():
            root = Path(base) / root
        return root / getattr(self, key)


@dataclass
class PretrainSection:
    steps: int = 200
    quotas: tuple = (8, 8, 8)
    save_every: int = 0
    log_wall_time: bool = False
    peak_lr: float = 1e-3
    warmup_steps: int = 20
    floor_lr: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.05
    grad_clip: float = 3.0

    def __post_init__(self):
        self.quotas = tuple(int(q) for q in self.quotas)


@dataclass
class FinetuneSection:
    epochs: int = 10
    batch_size: int = 32
    warmup_epochs: float = 1.0
    steps: int = 0  # when > 0, overrides epochs
    warmup_steps: int = 0  # when > 0, overrides warmup_epochs
    peak_lr: float = 1e-3
    layer_decay: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    grad_clip: float = 3.0
    drop_path: float = 0.0
    label_smoothing: float = 0.0
    mask_prob: float = 0.6
    fixed_fraction: bool = False
    beam_size: int = 3
    max_len: int = 16
    head_hidden: int = 0
    embed_dim: int = 0


# Defaults per task. Epochs, batch size and learning rate are at desk scale.
TASK_DEFAULTS = {
    "fusion-cls": dict(epochs=15, warmup_epochs=1, layer_decay=1.0, weight_decay=0.01, drop_path=0.0),
    "two-pair-cls": dict(epochs=20, warmup_epochs=5, layer_decay=0.8, weight_decay=0.05, drop_path=0.0),
    "retrieval": dict(epochs=10, warmup_epochs=3, layer_decay=0.95, weight_decay=0.05, drop_path=0.3,
                      batch_size=64),
    "caption": dict(epochs=40, warmup_epochs=1, layer_decay=1.0, weight_decay=0.01, drop_path=0.3,
                    mask_prob=0.6, label_smoothing=0.1, beam_size=3),
    "classify": dict(epochs=10, warmup_epochs=3, layer_decay=0.95, weight_decay=0.05, drop_path=0.3),
}


def default_finetune(task) -> FinetuneSection:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {', '.join(TASKS)}")
    return FinetuneSection(**TASK_DEFAULTS[task])


@dataclass
class RunConfig:
    name: str = "toy"
    seed: int = 0
    output_dir: str = "runs/toy"
    init_checkpoint: str = ""
    model: MultiwayConfig = field(default_factory=MultiwayConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    masking: MaskSettings = field(default_factory=MaskSettings)
    finetune: dict = field(default_factory=lambda: {t: default_finetune(t) for t in TASKS})
    source: str | None = None  # file the config was read from; not serialized

    # ---- derived training configs ------------------------------------------

    def pretrain_config(self) -> PretrainConfig:
        p = self.pretrain
        optim = OptimConfig(peak_lr=p.peak_lr, warmup_steps=p.warmup_steps, total_steps=p.steps,
                            floor_lr=p.floor_lr, beta1=p.beta1, beta2=p.beta2, eps=p.eps,
                            weight_decay=p.weight_decay, grad_clip=p.grad_clip)
        return PretrainConfig(steps=p.steps, quotas=p.quotas, seed=self.seed,
                              save_every=p.save_every, log_wall_time=p.log_wall_time,
                              optim=optim, masking=self.masking)

    def finetune_config(self, task, n_samples) -> FinetuneConfig:
        f = self.finetune.get(task) or default_finetune(task)
        per_epoch = max(1, -(-n_samples // f.batch_size))
        epochs = -(-f.steps // per_epoch) if f.steps > 0 else f.epochs
        total = max(1, f.steps if f.steps > 0 else epochs * per_epoch)
        warmup = f.warmup_steps if f.warmup_steps > 0 else int(round(f.warmup_epochs * per_epoch))
        warmup = min(warmup, total - 1)
        optim = OptimConfig(peak_lr=f.peak_lr, warmup_steps=warmup, total_steps=max(total, warmup + 1),
                            beta1=f.beta1, beta2=f.beta2, eps=f.eps, weight_decay=f.weight_decay,
                            grad_clip=f.grad_clip, layer_decay=f.layer_decay)
        return FinetuneConfig(epochs=epochs, batch_size=f.batch_size, drop_path=f.drop_path,
                              label_smoothing=f.label_smoothing, mask_prob=f.mask_prob,
                              fixed_fraction=f.fixed_fraction, beam_size=f.beam_size,
                              max_len=f.max_len, seed=self.seed, optim=optim)

    # ---- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        model = self.model.to_dict()
        model["patch_grid"] = list(model["patch_grid"])
        pre = dataclasses.asdict(self.pretrain)
        pre["quotas"] = list(pre["quotas"])
        return {
            "run": {"name": self.name, "seed": self.seed, "output_dir": self.output_dir,
                    "init_checkpoint": self.init_checkpoint},
            "model": model,
            "data": dataclasses.asdict(self.data),
            "pretrain": pre,
            "masking": dataclasses.asdict(self.masking),
            "finetune": {t: dataclasses.asdict(s) for t, s in self.finetune.items()},
        }

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, d: dict, text: str | None = None, source=None) -> "RunConfig":
        where = _Locator(text, source)
        known = {"run", "model", "data", "pretrain", "masking", "finetune"}
        for k in d:
            if k not in known:
                raise ConfigError(where(k, None, f"unknown section [{k}]"))
        run = dict(d.get("run", {}))
        _check_keys(run, {"name", "seed", "output_dir", "init_checkpoint"}, "run", where)
        model = _build(MultiwayConfig, d.get("model", {}), "model", where)
        try:
            model.validate()
        except ConfigError as e:
            raise ConfigError(where("model", None, str(e))) from None
        finetune = {t: default_finetune(t) for t in TASKS}
        for task, sec in d.get("finetune", {}).items():
            if task not in TASKS:
                raise ConfigError(where(f"finetune.{task}", None, f"unknown task {task!r}"))
            finetune[task] = _build(FinetuneSection, {**TASK_DEFAULTS[task], **sec},
                                    f"finetune.{task}", where)
        cfg = cls(
            name=_typed(run.get("name", "toy"), str, "run", "name", where),
            seed=_typed(run.get("seed", 0), int, "run", "seed", where),
            output_dir=_typed(run.get("output_dir", "runs/toy"), str, "run", "output_dir", where),
            init_checkpoint=_typed(run.get("init_checkpoint", ""), str, "run", "init_checkpoint", where),
            model=model,
            data=_build(DataConfig, d.get("data", {}), "data", where),
            pretrain=_build(PretrainSection, d.get("pretrain", {}), "pretrain", where),
            masking=_build(MaskSettings, d.get("masking", {}), "masking", where),
            finetune=finetune,
            source=str(source) if source else None,
        )
        if cfg.pretrain.steps < 0 or min(cfg.pretrain.quotas, default=0) < 0 or len(cfg.pretrain.quotas) != 3:
            raise ConfigError(where("pretrain", "quotas", "quotas must be three non-negative counts"))
        return cfg

    @classmethod
    def loads(cls, text: str, source=None) -> "RunConfig":
        try:
            d = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{source or '<string>'}: {e}") from None
        return cls.from_dict(d, text, source)

    @classmethod
    def load(cls, path, env=None) -> "RunConfig":
        path = Path(path)
        cfg = cls.loads(path.read_text(encoding="utf-8"), source=path)
        return cfg.with_env(os.environ if env is None else env)

    def with_env(self, env) -> "RunConfig":
        raw = env.get(SEED_ENV)
        if raw not in (None, ""):
            try:
                self.seed = int(raw)
            except ValueError:
                raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from None
        return self

    def base_dir(self) -> Path:
        """Directory relative paths in the config are resolved against."""
        return Path(self.source).parent if self.source else Path.cwd()

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir() / p

    def output_path(self) -> Path:
        return self.resolve(self.output_dir)

    def data_path(self, key) -> Path:
        return self.data.path(key, self.base_dir())


class _Locator:
    """Turns (section, key) into a ``file:line:`` prefixed message."""

    def __init__(self, text, source):
        self.lines = text.splitlines() if text else []
        self.source = str(source) if source else "<config>"

    def line_of(self, section, key):
        current, first = None, None
        for n, raw in enumerate(self.lines, 1):
            s = raw.strip()
            if s.startswith("["):
                current = s.strip("[] ").replace('"', "")
                if current == section and first is None:
                    first = n
                continue
            if key and current == section and s.split("=", 1)[0].strip().strip('"') == key:
                return n
        return first or 1

    def __call__(self, section, key, msg):
        return f"{self.source}:{self.line_of(section, key)}: {msg}"


def _check_keys(d, allowed, section, where):
    for k in d:
        if k not in allowed:
            raise ConfigError(where(section, k, f"unknown key {k!r} in [{section}]"))


def _typed(value, kind, section, key, where):
    ok = isinstance(value, kind) and not (kind is int and isinstance(value, bool))
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not ok:
        raise ConfigError(where(section, key, f"{section}.{key} must be {kind.__name__}, got {value!r}"))
    return value


def _build(klass, values: dict, section, where):
    fields = {f.name: f for f in dataclasses.fields(klass)}
    _check_keys(values, set(fields), section, where)
    defaults = klass()
    kwargs = {}
    for k, v in values.items():
        expected = type(getattr(defaults, k))
        if expected is tuple:
            if not isinstance(v, list) or not all(isinstance(x, int) for x in v):
                raise ConfigError(where(section, k, f"{section}.{k} must be a list of ints, got {v!r}"))
            kwargs[k] = tuple(v)
        else:
            kwargs[k] = _typed(v, expected, section, k, where)
    return klass(**kwargs)
