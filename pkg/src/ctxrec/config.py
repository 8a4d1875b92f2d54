"""Run configuration: dataclasses, flat key=value config files, precedence."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .synthlog import GeneratorConfig
from .util import canonical_json, fingerprint


@dataclass
class TrainConfig:
    gamma: float = 5e-2           # divergence-alignment loss weight
    lam: float = 1e-3             # prototype-independence loss weight
    anchor_weight: float = 0.5    # warm-up pull of decodes toward log-data dists
    tau: float = 1.0              # gate temperature at epoch 0
    tau_anneal: float = 0.95      # per-epoch multiplicative decay
    tau_floor: float = 0.1
    lr: float = 1e-3              # alignment warm-up learning rate
    main_lr: float = 1e-3         # combined-loss phase learning rate
    slow_factor: float = 0.1      # relative rate for warm-started geometry params
    epochs: int = 40
    warmup_epochs: int = 150      # alignment-only epochs before the combined loss
    batch_size: int = 128
    recent_window: int = 50       # r: short-term GRU window
    n_prototypes: int = 40
    dim: int = 16
    gat_layers: int = 2
    samples_per_user: int = 256   # per-epoch cap on one user's training samples
    holdout: float = 0.2
    sim_mode: str = "js"
    use_gta: bool = True
    use_mse: bool = True
    use_ind: bool = True
    subseq_cap: int = 200
    esu_epochs: int = 8
    esu_lr: float = 1e-2
    esu_hidden: int = 16
    esu_batch_groups: int = 16    # (user, context) groups per ESU batch

    def __post_init__(self):
        if min(self.gamma, self.lam, self.tau, self.lr) <= 0:
            raise ValueError("gamma, lam, tau and lr must be positive")
        if self.recent_window < 1:
            raise ValueError("recent_window must be >= 1")

    def apply_ablation(self, name: str | None) -> "TrainConfig":
        if name in (None, "", "full"):
            return self
        if name == "ip":
            return replace(self, sim_mode="ip")
        if name == "no-mse":
            return replace(self, use_mse=False)
        if name == "no-ind":
            return replace(self, use_ind=False)
        if name == "no-gta":
            return replace(self, use_gta=False)
        raise ValueError(f"unknown ablation {name!r}")


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    workers: int = 0              # 0: pick per task (cores for eval, 1 for training)

    def fingerprint(self) -> str:
        return fingerprint(asdict(self))


_SECTIONS = {"gen": GeneratorConfig, "train": TrainConfig, "run": None}


def _coerce(current, raw: str):
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(int(x) for x in raw.split(","))
    return raw


def parse_config_file(path) -> dict:
    """Flat `section.key = value` lines; '#' comments and blanks ignored."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, val = (part.strip() for part in line.split("=", 1))
        out[key] = val
    return out


def resolve(file_values: dict, flag_values: dict) -> RunConfig:
    """Defaults, overridden by config file, overridden by explicit flags."""
    cfg = RunConfig()
    merged = dict(file_values)
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    for key, raw in merged.items():
        if "." in key:
            section, name = key.split(".", 1)
        else:
            section, name = "run", key
        if section == "gen":
            target = cfg.generator
        elif section == "train":
            target = cfg.train
        elif section == "run":
            target = cfg
        else:
            raise ValueError(f"unknown config section {section!r}")
        if not hasattr(target, name):
            raise ValueError(f"unknown config key {key!r}")
        current = getattr(target, name)
        value = raw if not isinstance(raw, str) else _coerce(current, raw)
        setattr(target, name, value)
    return cfg


def dump_resolved(cfg: RunConfig) -> str:
    lines = []
    for section, obj in (("gen", cfg.generator), ("train", cfg.train)):
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{section}.{f.name} = {v}")
    lines.append(f"seed = {cfg.seed}")
    lines.append(f"workers = {cfg.workers}")
    return "\n".join(lines) + "\n"
