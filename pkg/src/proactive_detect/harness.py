"""Experiment configuration, training loops, evaluation and ablations.

Config files are INI-style (``key = value`` lines grouped into sections)::

    [experiment]  seed, output_dir, iterations, pretrain_fraction, batch_size,
                  checkpoint_every, eval_batch, arms
    [data]        train_path, test_path, image_size, num_classes,
                  camouflage_level, train_count, test_count, seed, ...
    [wrapper]     any WrapperConfig field
    [detector]    any DetectorConfig field except image_size / num_classes
    [optim]       detector_lr, wrapper_lr, detector_optimizer, wrapper_optimizer
    [theory]      any RegressionConfig field except seed

Tuples are comma separated.  Unknown sections or keys are a ConfigError.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import __version__
from .autograd import OptimizerKind, OptimizerSpec, Tensor, optimizer_step
from .autograd import checkpoint as ckpt
from .data import DatasetSpec, generate_dataset, read_dataset, write_dataset
from .detector import (
    Detector,
    DetectorConfig,
    assign_targets,
    decode_predictions,
    detection_loss,
    prediction_record,
    segmentation_loss,
    write_predictions,
)
from .metrics import GroundTruth, f_beta, mae, mean_ap
from .theory import RegressionConfig
from .wrapper import (
    ProactiveWrapper,
    TemplateMode,
    TrainingError,
    TransformMode,
    WrapperConfig,
    cosine_similarity,
    encrypt,
    loss_decoder,
    loss_encoder,
    total_loss,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING_DATASET = 4
EXIT_HASH_MISMATCH = 5
EXIT_TRAINING = 6

PASSIVE = "Passive"
ABLATION_ARMS = ("ImageDependent", "Fixed", "UniversalLearnable", "NoDecoder", "AdditiveTransform", "Passive2x")


class ConfigError(ValueError):
    pass


class MissingDatasetError(FileNotFoundError):
    pass


class HashMismatchError(RuntimeError):
    pass


class Mode(str, Enum):
    THEORY = "Theory"
    TRAIN_PASSIVE = "TrainPassive"
    TRAIN_PROACTIVE = "TrainProactive"
    ABLATION = "Ablation"
    EVAL = "Eval"


@dataclass
class DataConfig:
    train_path: str = "train.ds"
    test_path: str = "test.ds"
    image_size: int = 64
    num_classes: int = 3
    camouflage_level: float = 0.0
    train_count: int = 2000
    test_count: int = 500
    seed: int = 0
    objects_per_image: tuple = (1, 3)
    background_noise_sigma: float = 0.04

    def dataset_spec(self, split):
        if split not in ("train", "test"):
            raise ValueError(split)
        return DatasetSpec(
            image_size=self.image_size,
            num_classes=self.num_classes,
            objects_per_image=self.objects_per_image,
            camouflage_level=self.camouflage_level,
            background_noise_sigma=self.background_noise_sigma,
            count=self.train_count if split == "train" else self.test_count,
            # test scenes come from a disjoint stream
            seed=self.seed if split == "train" else self.seed + 1_000_003,
        )


@dataclass
class OptimConfig:
    detector_lr: float = 1e-3
    detector_optimizer: str = "SGD"
    wrapper_lr: float = 1e-5
    wrapper_optimizer: str = "AdaptiveMoment"

    def detector_spec(self):
        return OptimizerSpec(OptimizerKind(self.detector_optimizer), self.detector_lr)

    def wrapper_spec(self):
        return OptimizerSpec(OptimizerKind(self.wrapper_optimizer), self.wrapper_lr)


@dataclass
class ExperimentConfig:
    mode: Mode = Mode.TRAIN_PROACTIVE
    seed: int = 0
    output_dir: str = "runs"
    iterations: int = 5000  # detector steps of a proactive arm, pretraining included
    pretrain_fraction: float = 0.5
    batch_size: int = 16
    checkpoint_every: int = 0  # 0: final checkpoint only
    eval_batch: int = 50
    arms: tuple = ABLATION_ARMS
    data: DataConfig = field(default_factory=DataConfig)
    wrapper: WrapperConfig = field(default_factory=WrapperConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    theory: RegressionConfig = field(default_factory=RegressionConfig)

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.arms = tuple(self.arms)
        self.validate()

    def validate(self):
        if self.iterations <= 0:
            raise ConfigError("iterations must be positive")
        if not 0 < self.pretrain_fraction < 1:
            raise ConfigError("pretrain_fraction must lie in (0, 1)")
        if self.batch_size <= 0 or self.eval_batch <= 0 or self.checkpoint_every < 0:
            raise ConfigError("batch sizes must be positive and checkpoint_every nonnegative")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        for a in self.arms:
            if a not in ABLATION_ARMS:
                raise ConfigError(f"unknown arm {a!r}")
        if self.detector.image_size != self.data.image_size or self.detector.num_classes != self.data.num_classes:
            raise ConfigError("detector image_size / num_classes must match the data section")

    @property
    def pretrain_steps(self):
        return int(round(self.iterations * self.pretrain_fraction))

    @property
    def finetune_steps(self):
        return self.iterations - self.pretrain_steps

    def to_dict(self):
        d = dataclasses.asdict(self)
        return json.loads(json.dumps(d, default=_json_default))

    def config_hash(self):
        """Hash of everything that determines training results."""
        d = self.to_dict()
        for k in ("mode", "output_dir", "arms"):
            d.pop(k)
        d["data"].pop("train_path")
        d["data"].pop("test_path")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _json_default(o):
    if isinstance(o, Enum):
        return o.value
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


# -- config file parsing ----------------------------------------------------------

_SECTIONS = {"data": DataConfig, "wrapper": WrapperConfig, "detector": DetectorConfig,
             "optim": OptimConfig, "theory": RegressionConfig}
_TOP_KEYS = ("mode", "seed", "output_dir", "iterations", "pretrain_fraction", "batch_size",
             "checkpoint_every", "eval_batch", "arms")
_DERIVED_KEYS = {"detector": ("image_size", "num_classes"), "theory": ("seed",)}


def _coerce(text, default, name):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(text)
            return low in ("true", "yes", "1", "on")
        if isinstance(default, Enum):
            return type(default)(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            sample = default[0] if default else ""
            return tuple(type(sample)(p) if not isinstance(sample, str) else p for p in parts)
        return text
    except ValueError as e:
        raise ConfigError(f"bad value for {name}: {text!r} ({e})") from None


def _field_defaults(cls):
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in dataclasses.fields(cls)}


def build_config(sections: dict) -> ExperimentConfig:
    """Build a config from ``{section: {key: text}}``; unknown keys raise ConfigError."""
    top_defaults = {k: getattr(ExperimentConfig.__dataclass_fields__[k], "default") for k in _TOP_KEYS}
    top_defaults["mode"] = Mode.TRAIN_PROACTIVE
    top = {}
    subs = {name: {} for name in _SECTIONS}
    for section, items in sections.items():
        if section == "experiment":
            for k, v in items.items():
                if k not in _TOP_KEYS:
                    raise ConfigError(f"unknown key [experiment] {k}")
                top[k] = _coerce(v, top_defaults[k], f"experiment.{k}")
        elif section in _SECTIONS:
            defaults = _field_defaults(_SECTIONS[section])
            for k, v in items.items():
                if k not in defaults or k in _DERIVED_KEYS.get(section, ()):
                    raise ConfigError(f"unknown key [{section}] {k}")
                subs[section][k] = _coerce(v, defaults[k], f"{section}.{k}")
        else:
            raise ConfigError(f"unknown section [{section}]")
    try:
        data = DataConfig(**subs["data"])
        detector = DetectorConfig(image_size=data.image_size, num_classes=data.num_classes, **subs["detector"])
        seed = top.get("seed", 0)
        return ExperimentConfig(
            data=data,
            wrapper=WrapperConfig(**subs["wrapper"]),
            detector=detector,
            optim=OptimConfig(**subs["optim"]),
            theory=RegressionConfig(seed=seed, **subs["theory"]),
            **top,
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None


def parse_config_text(text, overrides=()):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"unparseable config: {e}") from None
    sections = {s: dict(parser.items(s)) for s in parser.sections()}
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        sections.setdefault(section, {})[name] = value
    return build_config(sections)


def load_config(path, overrides=()):
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config_text(text, overrides)


# -- datasets -----------------------------------------------------------------------

class PreparedData:
    """A dataset with its grid targets precomputed for fast batching."""

    def __init__(self, ds, detector_config, sha256=None):
        self.dataset = ds
        self.sha256 = sha256
        self.images = ds.images()
        self.seg = ds.seg_maps().astype(np.float32)
        self.annotations = [s.annotations for s in ds.scenes]
        self.targets = assign_targets(self.annotations, detector_config)

    def __len__(self):
        return len(self.images)

    def batch(self, idx):
        t = self.targets
        sub = type(t)(t.mask[idx], t.boxes[idx], t.classes[idx], t.collisions[idx])
        return self.images[idx], self.seg[idx], sub


def _file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_split(config: ExperimentConfig, split):
    path = config.data.train_path if split == "train" else config.data.test_path
    if not os.path.exists(path):
        raise MissingDatasetError(f"{split} dataset not found: {path}")
    ds = read_dataset(path)
    if ds.spec.image_size != config.data.image_size or ds.spec.num_classes != config.data.num_classes:
        raise ConfigError(f"{path}: dataset shape does not match the config")
    return PreparedData(ds, config.detector, _file_sha256(path))


def generate_splits(config: ExperimentConfig):
    """Write both dataset files; returns their sha256 digests."""
    out = {}
    for split in ("train", "test"):
        path = config.data.train_path if split == "train" else config.data.test_path
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        out[split] = write_dataset(config.data.dataset_spec(split), path)
    return out


def in_memory_split(config: ExperimentConfig, split):
    ds = generate_dataset(config.data.dataset_spec(split))
    from .data import dumps_dataset
    return PreparedData(ds, config.detector, hashlib.sha256(dumps_dataset(ds)).hexdigest())


# -- models ---------------------------------------------------------------------------

def arm_wrapper_config(base: WrapperConfig, arm: str):
    """Wrapper settings of an ablation arm; None for passive arms."""
    if arm in (PASSIVE, "Passive2x"):
        return None
    changes = {
        "ImageDependent": {},
        "Fixed": {"template_mode": TemplateMode.FIXED},
        "UniversalLearnable": {"template_mode": TemplateMode.UNIVERSAL},
        "NoDecoder": {"use_decoder": False},
        "AdditiveTransform": {"transform_mode": TransformMode.ADD},
    }
    if arm not in changes:
        raise ConfigError(f"unknown arm {arm!r}")
    return dataclasses.replace(base, **changes[arm])


class Model:
    """Detector plus optional wrapper, checkpointed as one prefixed state."""

    def __init__(self, config: ExperimentConfig, wrapper_config: WrapperConfig | None):
        self.config = config
        self.detector = Detector(config.detector, config.seed)
        self.wrapper = None
        if wrapper_config is not None:
            self.wrapper = ProactiveWrapper(wrapper_config, config.data.image_size, config.seed)

    def state_dict(self):
        state = self.detector.state_dict("detector.")
        if self.wrapper is not None:
            state.update(self.wrapper.state_dict())
        return state

    def load_detector(self, state):
        self.detector.load_state_dict(state, "detector.")

    def load(self, state):
        self.load_detector(state)
        if self.wrapper is not None:
            self.wrapper.load_state_dict(state)

    def train(self, mode=True):
        self.detector.train(mode)
        if self.wrapper is not None:
            self.wrapper.train(mode)


# -- training -------------------------------------------------------------------------

@dataclass
class StepLosses:
    J: float
    J_OBJ: float
    J_E: float
    J_D: float


def _batch_order(seed, arm_tag, epoch, n):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(301, arm_tag, epoch)))
    return rng.permutation(n)


def _forward_losses(model: Model, images, seg, targets, weights, train_decoder=True):
    wrapper = model.wrapper
    x = Tensor(images)
    template = None
    if wrapper is not None:
        template = wrapper.template(x)
        inp = encrypt(x, template, wrapper.config.transform_mode)
    else:
        inp = x
    out = model.detector(inp)
    cfg = model.detector.config
    j_obj = Tensor(np.zeros((), dtype=np.float32))
    if cfg.has_god:
        j_obj = j_obj + detection_loss(out["grid"], targets, cfg)
    if cfg.has_cod:
        j_obj = j_obj + segmentation_loss(out["seg"], seg)
    zero = Tensor(np.zeros((), dtype=np.float32))
    j_e, j_d = zero, zero
    use_decoder = False
    if wrapper is not None:
        j_e = loss_encoder(template, seg[..., None])
        use_decoder = wrapper.config.use_decoder and train_decoder
        if use_decoder:
            j_d = loss_decoder(wrapper.recover(inp), template)
    total = total_loss(j_obj, j_e, j_d, weights, use_decoder=use_decoder)
    return total, StepLosses(float(total.data), float(j_obj.data), float(j_e.data), float(j_d.data))


def _train_loop(model: Model, data: PreparedData, steps, config: ExperimentConfig, arm, arm_tag, ckpt_dir):
    """SGD on the detector (and Adam on the wrapper); returns per-epoch mean losses."""
    model.train(True)
    weights = model.wrapper.config.loss_weights if model.wrapper is not None else None
    if weights is None:
        weights = (config.wrapper.loss_weights[0], 0.0, 0.0)
    det_params = model.detector.parameters()
    wrap_params = model.wrapper.parameters() if model.wrapper is not None else []
    det_spec, wrap_spec = config.optim.detector_spec(), config.optim.wrapper_spec()
    n, bs = len(data), config.batch_size
    per_epoch = max(n // bs, 1)
    curves = {k: [] for k in ("J", "J_OBJ", "J_E", "J_D")}
    window = []
    order = None
    for step in range(steps):
        epoch, pos = divmod(step, per_epoch)
        if pos == 0:
            order = _batch_order(config.seed, arm_tag, epoch, n)
        idx = np.sort(order[pos * bs:(pos + 1) * bs])
        images, seg, targets = data.batch(idx)
        for p in det_params + wrap_params:
            p.zero_grad()
        try:
            total, losses = _forward_losses(model, images, seg, targets, weights)
        except (TrainingError, FloatingPointError) as e:
            raise TrainingError(f"{arm}: non-finite loss at iteration {step}: {e}") from None
        total.backward()
        optimizer_step(det_params, det_spec)
        if wrap_params:
            optimizer_step(wrap_params, wrap_spec)
        window.append(losses)
        if pos == per_epoch - 1 or step == steps - 1:
            for k in curves:
                curves[k].append(float(np.mean([getattr(w, k) for w in window])))
            window = []
        if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0 and ckpt_dir is not None:
            ckpt.save(model.state_dict(), Path(ckpt_dir) / f"{arm}_step{step + 1:06d}.ckpt")
    return curves


# -- evaluation -----------------------------------------------------------------------

class DecoderAccessError(RuntimeError):
    pass


class _DecoderGuard:
    def __getattr__(self, name):
        raise DecoderAccessError(f"decoder accessed at eval time ({name})")

    def __call__(self, *a, **k):
        raise DecoderAccessError("decoder called at eval time")


def evaluate(model: Model, data: PreparedData, config: ExperimentConfig, identity_template=False,
             predictions_path=None):
    """Encoder + detector only; the decoder is swapped for a guard that raises on access."""
    model.train(False)
    wrapper = model.wrapper
    saved = None
    if wrapper is not None:
        saved, wrapper.decoder = wrapper.decoder, _DecoderGuard()
    try:
        return _evaluate(model, data, config, identity_template, predictions_path)
    finally:
        if wrapper is not None:
            wrapper.decoder = saved


def _evaluate(model, data, config, identity_template, predictions_path):
    det_cfg = model.detector.config
    wrapper = model.wrapper
    dets, gts, records = [], [], []
    maes, fbs, template_means = [], [], []
    for start in range(0, len(data), config.eval_batch):
        idx = np.arange(start, min(start + config.eval_batch, len(data)))
        images, seg, _ = data.batch(idx)
        x = Tensor(images)
        if identity_template:
            inp = encrypt(x, Tensor(np.ones(images.shape[:3] + (1,), dtype=images.dtype)))
        elif wrapper is not None:
            template = wrapper.template(x)
            template_means.extend(template.data.reshape(len(idx), -1).mean(axis=1).tolist())
            inp = encrypt(x, template, wrapper.config.transform_mode)
        else:
            inp = x
        out = model.detector(inp)
        for k, i in enumerate(idx):
            i = int(i)
            image_dets = None
            if det_cfg.has_god:
                image_dets = decode_predictions(out["grid"].data[k], det_cfg, image_id=i)
                dets.extend(image_dets)
                gts.extend(GroundTruth(b, c, i) for b, c in data.annotations[i])
            seg_pred = None
            if det_cfg.has_cod:
                seg_pred = out["seg"].data[k, ..., 0]
                maes.append(mae(seg_pred, seg[k]))
                if seg[k].any():
                    fbs.append(f_beta(seg_pred, seg[k]))
            records.append(prediction_record(i, image_dets, seg_pred))
    metrics = {}
    if det_cfg.has_god:
        metrics.update(mean_ap(dets, gts))
    if det_cfg.has_cod:
        metrics["MAE"] = float(np.mean(maes))
        metrics["F_beta"] = float(np.mean(fbs)) if fbs else 0.0
    if template_means:
        metrics["template_mean"] = float(np.mean(template_means))
    if predictions_path is not None:
        write_predictions(records, predictions_path)
    return metrics


def decoder_recovery(model: Model, data: PreparedData, config: ExperimentConfig):
    """Mean cosine similarity between recovered and generated templates."""
    wrapper = model.wrapper
    if wrapper is None:
        return None
    model.train(False)
    vals = []
    for start in range(0, len(data), config.eval_batch):
        idx = np.arange(start, min(start + config.eval_batch, len(data)))
        images, _, _ = data.batch(idx)
        x = Tensor(images)
        template = wrapper.template(x)
        enc = encrypt(x, template, wrapper.config.transform_mode)
        vals.extend(cosine_similarity(wrapper.recover(enc), template).data.tolist())
    return float(np.mean(vals))


# -- orchestration ----------------------------------------------------------------------

_ARM_TAGS = {PASSIVE: 0, **{a: k + 1 for k, a in enumerate(ABLATION_ARMS)}}


def _run_report(config, arm, curves, metrics, checkpoints, datasets, extra=None):
    report = {
        "arm": arm,
        "seed": config.seed,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "version": __version__,
        "schedule": {
            "pretrain_steps": config.pretrain_steps,
            "finetune_steps": config.finetune_steps,
            "pretrain_fraction": config.pretrain_fraction,
        },
        "loss_curves": curves,
        "metrics": metrics,
        "checkpoints": checkpoints,
        "datasets": datasets,
    }
    if extra:
        report.update(extra)
    return report


def write_json(obj, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def pretrain_passive(config, train, out_dir):
    """Passive detector training for the pretraining share of the budget."""
    model = Model(config, None)
    curves = _train_loop(model, train, config.pretrain_steps, config, PASSIVE, _ARM_TAGS[PASSIVE], out_dir)
    path = Path(out_dir) / "passive_pretrain.ckpt"
    digest = ckpt.save(model.state_dict(), path)
    return model, curves, path, digest


def finetune_arm(config, arm, train, test, pretrain_path, out_dir):
    """Fine-tune one arm from the passive checkpoint; returns its RunReport."""
    state = ckpt.load(pretrain_path)
    model = Model(config, arm_wrapper_config(config.wrapper, arm))
    model.load_detector(state)
    curves = _train_loop(model, train, config.finetune_steps, config, arm, _ARM_TAGS[arm], out_dir)
    path = Path(out_dir) / f"{arm}.ckpt"
    digest = ckpt.save(model.state_dict(), path)
    metrics = evaluate(model, test, config, predictions_path=Path(out_dir) / f"{arm}.predictions.jsonl")
    extra = {}
    if model.wrapper is not None and model.wrapper.config.use_decoder:
        extra["decoder_cosine"] = decoder_recovery(model, test, config)
    return _run_report(
        config, arm, curves, metrics,
        {"pretrain": ckpt.content_hash(pretrain_path), "final": digest},
        {"train": train.sha256, "test": test.sha256},
        extra,
    )


def run_training(config: ExperimentConfig, train=None, test=None, arm=None):
    """Train one arm end to end (pretrain + fine-tune) and write its report.

    ``arm`` defaults to ImageDependent for TrainProactive and Passive2x for
    TrainPassive.  Datasets are read from the configured paths unless given.
    """
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = train or load_split(config, "train")
    test = test or load_split(config, "test")
    if arm is None:
        arm = "Passive2x" if config.mode is Mode.TRAIN_PASSIVE else "ImageDependent"
    t0 = time.perf_counter()
    _, pre_curves, pre_path, _ = pretrain_passive(config, train, out_dir)
    report = finetune_arm(config, arm, train, test, pre_path, out_dir)
    report["pretrain_loss_curves"] = pre_curves
    write_json(report, out_dir / f"{arm}.report.json")
    write_json({"arm": arm, "wall_clock_seconds": time.perf_counter() - t0}, out_dir / f"{arm}.timing.json")
    return report


def _arm_worker(args):
    config, arm, pre_path, out_dir = args
    train = load_split(config, "train")
    test = load_split(config, "test")
    return finetune_arm(config, arm, train, test, pre_path, out_dir)


def run_ablation(config: ExperimentConfig, train=None, test=None, workers=1):
    """Shared passive pretraining, then one fine-tune per arm; reports in arm order."""
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    from_files = train is None
    train = train or load_split(config, "train")
    test = test or load_split(config, "test")
    _, pre_curves, pre_path, _ = pretrain_passive(config, train, out_dir)
    timings = {"pretrain": time.perf_counter() - t0}
    if workers > 1 and from_files:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_arm_worker, [(config, a, pre_path, out_dir) for a in config.arms]))
    else:
        reports = []
        for arm in config.arms:
            t1 = time.perf_counter()
            reports.append(finetune_arm(config, arm, train, test, pre_path, out_dir))
            timings[arm] = time.perf_counter() - t1
    for report in reports:
        report["pretrain_loss_curves"] = pre_curves
        write_json(report, out_dir / f"{report['arm']}.report.json")
    write_json({"wall_clock_seconds": timings}, out_dir / "ablation.timing.json")
    return reports


def eval_checkpoint(config: ExperimentConfig, checkpoint_path, arm="ImageDependent", identity_template=False,
                    report_path=None, test=None):
    """Metrics of a saved checkpoint; with a report, hashes must match it."""
    if report_path is not None:
        with open(report_path) as fh:
            report = json.load(fh)
        if report["config_hash"] != config.config_hash():
            raise HashMismatchError("config hash differs from the run report")
        if report["checkpoints"]["final"] != ckpt.content_hash(checkpoint_path):
            raise HashMismatchError("checkpoint hash differs from the run report")
        arm = report["arm"]
    state = ckpt.load(checkpoint_path)
    has_wrapper = any(k.startswith("encoder.") for k in state)
    model = Model(config, arm_wrapper_config(config.wrapper, arm) if has_wrapper else None)
    model.load(state) if has_wrapper else model.load_detector(state)
    test = test or load_split(config, "test")
    return evaluate(model, test, config, identity_template=identity_template)


def aggregate_reports(reports):
    """Per-arm metric table (median over seeds) plus plot-ready loss series."""
    by_arm = {}
    for r in reports:
        by_arm.setdefault(r["arm"], []).append(r)
    table = []
    series = {}
    for arm in sorted(by_arm):
        rs = sorted(by_arm[arm], key=lambda r: r["seed"])
        keys = sorted(set().union(*(r["metrics"] for r in rs)))
        row = {"arm": arm, "seeds": len(rs)}
        for k in keys:
            vals = [r["metrics"][k] for r in rs if k in r["metrics"]]
            row[f"{k}_median"] = float(np.median(vals))
        table.append(row)
        series[arm] = {str(r["seed"]): r["loss_curves"] for r in rs}
    return {"table": table, "series": series}


def median_metric(reports, arm, key):
    vals = [r["metrics"][key] for r in reports if r["arm"] == arm]
    return float(np.median(vals)) if vals else math.nan
