"""INI run configuration: every stage's settings in one file with section headers."""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .augment import DEFAULT_PARAMS, DEFAULT_PROBS, TRANSFORM_IDS, AugmentPipeline, AugmentStep
from .encoder import EncoderConfig, TrainConfig
from .errors import ConfigError
from .finetune import FinetuneConfig
from .losses import LossConfig, combination_name
from .stain import StainConfig

SEED_ENV = "CHL_SEED"

# (section, key) -> help text; also the set of accepted keys.
KEY_DOCS: dict[tuple[str, str], str] = {
    ("run", "seed"): "global seed for splits, initialization, batch order and augmentation",
    ("run", "manifest"): "dataset manifest CSV (path,label,patient_id,magnification,fold)",
    ("run", "out_dir"): "directory receiving checkpoints, caches and reports",
    ("run", "magnification"): "magnification to keep (40X, 100X, 200X, 400X, NA or all)",
    ("run", "folds"): "comma-separated fold indices to run, or 'all'",
    ("run", "n_folds"): "number of independent patient-level resamplings",
    ("run", "split_ratios"): "train,val,test patient ratios",
    ("run", "relax_threshold"): "similarity threshold for pruning pairs",
    ("run", "skip_relax"): "retrain stage 2 on unrelaxed pairs (baseline)",
    ("encoder", "input_size"): "square input side in pixels",
    ("encoder", "channels"): "conv block widths, comma-separated",
    ("encoder", "embed_dim"): "embedding dimension shared by encoder and heads",
    ("pretrain", "learning_rate"): "Adam learning rate, first contrastive stage",
    ("pretrain", "epochs"): "epochs, first contrastive stage",
    ("pretrain", "batch_size"): "source images per batch (2x rows after augmentation)",
    ("relax", "learning_rate"): "Adam learning rate, relaxed retraining",
    ("relax", "epochs"): "epochs, relaxed retraining",
    ("relax", "batch_size"): "source images per batch, relaxed retraining",
    ("optimizer", "beta1"): "Adam first-moment decay",
    ("optimizer", "beta2"): "Adam second-moment decay",
    ("optimizer", "eps"): "Adam denominator epsilon",
    ("loss", "tau"): "contrastive temperature",
    ("loss", "lambda_neg"): "weight on negative pairs in the denominator",
    ("loss", "alpha_mode"): "uniform or inverse_class_frequency",
    ("loss", "combination"): "modified, comb1..comb7, or terms joined by '+'",
    ("augment", "p_crop"): "probability of random resized crop",
    ("augment", "p_jitter"): "probability of color jitter",
    ("augment", "p_blur"): "probability of Gaussian blur",
    ("augment", "p_geometric"): "probability of a flip or rotation",
    ("augment", "p_hed"): "probability of HED stain perturbation",
    ("augment", "crop_scale_min"): "smallest crop area fraction",
    ("augment", "crop_scale_max"): "largest crop area fraction (<= 1)",
    ("augment", "hed_strength"): "HED perturbation strength in [0, 1]",
    ("stain", "sparsity_weight"): "l1 weight on stain concentrations",
    ("stain", "max_iterations"): "NMF iteration cap",
    ("stain", "tolerance"): "NMF relative-change stopping tolerance",
    ("finetune", "eta"): "auxiliary loss coefficient",
    ("finetune", "dropout_p"): "dropout probability between classifier layers",
    ("finetune", "learning_rate"): "Adam learning rate, fine-tuning",
    ("finetune", "epochs"): "fine-tuning epochs",
    ("finetune", "batch_size"): "fine-tuning batch size",
    ("finetune", "hidden"): "classifier hidden widths h1,h2",
    ("finetune", "class_weights"): "uniform or inverse_class_frequency",
    ("finetune", "aux_sign_mode"): "reversal (head minimizes, encoder maximizes) or literal",
    ("finetune", "hed_strength"): "HED strength applied before every fine-tune view",
    ("finetune", "stain_iterations"): "NMF iterations for per-image stain targets",
}


def config_help() -> str:
    lines = ["config keys (INI sections):"]
    section = None
    for (sec, key), text in KEY_DOCS.items():
        if sec != section:
            lines.append(f"  [{sec}]")
            section = sec
        lines.append(f"    {key}: {text}")
    return "\n".join(lines)


@dataclass
class RunConfig:
    seed: int = 0
    manifest: str = ""
    out_dir: str = "runs/default"
    magnification: str = "all"
    folds: tuple[int, ...] = (0,)
    n_folds: int = 5
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    relax_threshold: float = 0.5
    skip_relax: bool = False
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    relax: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment_probs: dict = field(default_factory=lambda: dict(DEFAULT_PROBS))
    crop_scale: tuple[float, float] = (0.6, 1.0)
    hed_strength: float = 0.05
    stain: StainConfig = field(default_factory=StainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    stain_iterations: int = 30

    def __post_init__(self):
        if not -1.0 < self.relax_threshold < 1.0:
            raise ConfigError("relax_threshold must lie in (-1, 1)")
        if any(f < 0 or f >= self.n_folds for f in self.folds):
            raise ConfigError(f"fold indices must lie in 0..{self.n_folds - 1}")
        if len(self.split_ratios) != 3 or min(self.split_ratios) <= 0:
            raise ConfigError("split_ratios needs three positive values")
        if self.stain_iterations < 1:
            raise ConfigError("stain_iterations must be >= 1")

    def pipeline(self) -> AugmentPipeline:
        steps = []
        for t in TRANSFORM_IDS:
            params = {}
            if t == "crop":
                params = {"scale_min": self.crop_scale[0], "scale_max": self.crop_scale[1]}
            elif t == "hed":
                params = {
                    "strength": self.hed_strength,
                    "max_iterations": self.stain_iterations,
                    "sparsity_weight": self.stain.sparsity_weight,
                }
            steps.append(AugmentStep(t, self.augment_probs[t], params))
        try:
            return AugmentPipeline(steps, self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def stain_target_config(self) -> StainConfig:
        return replace(self.stain, max_iterations=self.stain_iterations)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(
            self,
            seed=seed,
            pretrain=replace(self.pretrain, rng_seed=seed),
            relax=replace(self.relax, rng_seed=seed),
            finetune=replace(self.finetune, rng_seed=seed),
            stain=replace(self.stain, rng_seed=seed),
        )


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_config(parser: configparser.ConfigParser, base_dir: Path | None = None) -> RunConfig:
    for sec in parser.sections():
        for key in parser[sec]:
            if (sec, key) not in KEY_DOCS:
                raise ConfigError(f"unknown config key [{sec}] {key}")
    g = lambda sec, key, default: parser.get(sec, key, fallback=None) or default  # noqa: E731
    try:
        seed = int(g("run", "seed", "0"))
        n_folds = int(g("run", "n_folds", "5"))
        folds_text = g("run", "folds", "0")
        folds = tuple(range(n_folds)) if folds_text.strip() == "all" else _ints(folds_text)
        manifest = g("run", "manifest", "")
        if manifest and base_dir is not None and not Path(manifest).is_absolute():
            manifest = str(base_dir / manifest)
        enc = EncoderConfig(
            int(g("encoder", "input_size", "32")),
            _ints(g("encoder", "channels", "16,32,64")),
            int(g("encoder", "embed_dim", "32")),
        )
        opt = dict(
            beta1=float(g("optimizer", "beta1", "0.9")),
            beta2=float(g("optimizer", "beta2", "0.999")),
            eps=float(g("optimizer", "eps", "1e-8")),
        )

        def train_cfg(sec):
            return TrainConfig(
                learning_rate=float(g(sec, "learning_rate", "1e-5")),
                epochs=int(g(sec, "epochs", "200")),
                batch_size=int(g(sec, "batch_size", "12")),
                rng_seed=seed,
                **opt,
            )

        loss = LossConfig(
            tau=float(g("loss", "tau", "0.01")),
            lambda_neg=float(g("loss", "lambda_neg", "2.0")),
            alpha_mode=g("loss", "alpha_mode", "inverse_class_frequency"),
            combination=g("loss", "combination", "modified"),
        )
        probs = {t: float(g("augment", f"p_{t}", str(DEFAULT_PROBS[t]))) for t in TRANSFORM_IDS}
        crop = (
            float(g("augment", "crop_scale_min", str(DEFAULT_PARAMS["crop"]["scale_min"]))),
            float(g("augment", "crop_scale_max", str(DEFAULT_PARAMS["crop"]["scale_max"]))),
        )
        stain = StainConfig(
            sparsity_weight=float(g("stain", "sparsity_weight", "0.1")),
            max_iterations=int(g("stain", "max_iterations", "500")),
            tolerance=float(g("stain", "tolerance", "1e-6")),
            rng_seed=seed,
        )
        ft = FinetuneConfig(
            eta=float(g("finetune", "eta", "0.5")),
            dropout_p=float(g("finetune", "dropout_p", "0.5")),
            learning_rate=float(g("finetune", "learning_rate", "2e-5")),
            epochs=int(g("finetune", "epochs", "20")),
            batch_size=int(g("finetune", "batch_size", "8")),
            hidden=_ints(g("finetune", "hidden", "64,16")),
            class_weights=g("finetune", "class_weights", "inverse_class_frequency"),
            aux_sign_mode=g("finetune", "aux_sign_mode", "reversal"),
            hed_strength=float(g("finetune", "hed_strength", "0.05")),
            rng_seed=seed,
        )
        cfg = RunConfig(
            seed=seed,
            manifest=manifest,
            out_dir=g("run", "out_dir", "runs/default"),
            magnification=g("run", "magnification", "all"),
            folds=folds,
            n_folds=n_folds,
            split_ratios=_floats(g("run", "split_ratios", "0.6,0.2,0.2")),
            relax_threshold=float(g("run", "relax_threshold", "0.5")),
            skip_relax=_bool(g("run", "skip_relax", "false")),
            encoder=enc,
            pretrain=train_cfg("pretrain"),
            relax=train_cfg("relax"),
            loss=loss,
            augment_probs=probs,
            crop_scale=crop,
            hed_strength=float(g("augment", "hed_strength", "0.05")),
            stain=stain,
            finetune=ft,
            stain_iterations=int(g("finetune", "stain_iterations", "30")),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg.pipeline()  # validates augmentation settings
    return cfg


def load_config(path=None, apply_env: bool = True) -> RunConfig:
    """Read an INI file (or defaults when ``path`` is None); ``CHL_SEED`` overrides the seed."""
    parser = configparser.ConfigParser()
    base = None
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base = path.parent
    cfg = parse_config(parser, base)
    env = os.environ.get(SEED_ENV) if apply_env else None
    if env:
        try:
            cfg = cfg.with_seed(int(env))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return cfg


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_parser(cfg: RunConfig) -> configparser.ConfigParser:
    """Fully expanded config, every key present."""
    p = configparser.ConfigParser()
    p["run"] = {
        "seed": _fmt(cfg.seed),
        "manifest": cfg.manifest,
        "out_dir": cfg.out_dir,
        "magnification": cfg.magnification,
        "folds": _fmt(cfg.folds),
        "n_folds": _fmt(cfg.n_folds),
        "split_ratios": _fmt(tuple(float(r) for r in cfg.split_ratios)),
        "relax_threshold": _fmt(cfg.relax_threshold),
        "skip_relax": _fmt(cfg.skip_relax),
    }
    p["encoder"] = {
        "input_size": _fmt(cfg.encoder.input_size),
        "channels": _fmt(cfg.encoder.channels),
        "embed_dim": _fmt(cfg.encoder.embed_dim),
    }
    for sec, t in (("pretrain", cfg.pretrain), ("relax", cfg.relax)):
        p[sec] = {
            "learning_rate": _fmt(float(t.learning_rate)),
            "epochs": _fmt(t.epochs),
            "batch_size": _fmt(t.batch_size),
        }
    p["optimizer"] = {
        "beta1": _fmt(cfg.pretrain.beta1),
        "beta2": _fmt(cfg.pretrain.beta2),
        "eps": _fmt(cfg.pretrain.eps),
    }
    p["loss"] = {
        "tau": _fmt(cfg.loss.tau),
        "lambda_neg": _fmt(cfg.loss.lambda_neg),
        "alpha_mode": cfg.loss.alpha_mode,
        "combination": combination_name(cfg.loss.combination),
    }
    aug = {f"p_{t}": _fmt(float(cfg.augment_probs[t])) for t in TRANSFORM_IDS}
    aug.update(
        crop_scale_min=_fmt(float(cfg.crop_scale[0])),
        crop_scale_max=_fmt(float(cfg.crop_scale[1])),
        hed_strength=_fmt(float(cfg.hed_strength)),
    )
    p["augment"] = aug
    p["stain"] = {
        "sparsity_weight": _fmt(float(cfg.stain.sparsity_weight)),
        "max_iterations": _fmt(cfg.stain.max_iterations),
        "tolerance": _fmt(float(cfg.stain.tolerance)),
    }
    ft = cfg.finetune
    p["finetune"] = {
        "eta": _fmt(float(ft.eta)),
        "dropout_p": _fmt(float(ft.dropout_p)),
        "learning_rate": _fmt(float(ft.learning_rate)),
        "epochs": _fmt(ft.epochs),
        "batch_size": _fmt(ft.batch_size),
        "hidden": _fmt(ft.hidden),
        "class_weights": ft.class_weights,
        "aux_sign_mode": ft.aux_sign_mode,
        "hed_strength": _fmt(float(ft.hed_strength)),
        "stain_iterations": _fmt(cfg.stain_iterations),
    }
    return p


def write_resolved_config(path, cfg: RunConfig) -> None:
    with open(path, "w") as fh:
        to_parser(cfg).write(fh)
