"""Monte Carlo checks of passive vs template-scaled ("proactive") SGD.

Setting: linear regression ``y = w*.i + e`` with ``i ~ N(0, I_dim)`` and
``e ~ N(0, sigma^2)``, trained from ``w_0 = 0`` by single-sample SGD with
step ``s_k = step_base / k``.  The proactive model sees the image scaled by a
scalar template ``s`` and minimises ``0.5 * (s w.i - y)^2``.

Every trial draws its own stream from ``(seed, trial_index)``; the passive and
proactive runs of a trial consume the same stream (common random numbers).
Trials are simulated in vectorised batches, but each row only ever touches
its own data, so a trial's result does not depend on which batch it ran in.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
from scipy import stats

from .metrics import BBox, Detection, GroundTruth, average_precision

BATCH_TRIALS = 256


class Verdict(str, Enum):
    LEMMA_HOLDS = "LemmaHolds"
    LEMMA_VIOLATED = "LemmaViolated"
    INCONCLUSIVE = "Inconclusive"


@dataclass
class RegressionConfig:
    dim: int = 8
    sigma: float = 1.0
    step_base: float = 0.5
    max_steps: int = 1000
    trials: int = 2000
    template_scalar: float = 0.5
    seed: int = 0
    significance: float = 0.01

    def __post_init__(self):
        if self.dim <= 0 or self.max_steps <= 0 or self.trials <= 0:
            raise ValueError("dim, max_steps and trials must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.step_base <= 0:
            raise ValueError("step_base must be positive")
        if not 0 < self.template_scalar <= 1:
            raise ValueError("template_scalar must lie in (0, 1]")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass
class TrialResult:
    final_weight: np.ndarray
    distance_to_optimal: float
    gradient_variance_estimate: float


@dataclass
class ConvergenceReport:
    passive_mean_distance: float
    proactive_mean_distance: float
    passive_variance_bound: float
    proactive_variance_bound: float
    p_value: float
    verdict: Verdict
    passive_variance_estimate: float = 0.0
    proactive_variance_estimate: float = 0.0
    per_trial: dict = field(default_factory=dict, repr=False)

    def to_json(self):
        d = asdict(self)
        d.pop("per_trial")
        d["verdict"] = self.verdict.value
        return json.dumps(d, indent=2, sort_keys=True)

    def write_csv(self, path):
        cols = list(self.per_trial)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trial_index"] + cols)
            for k in range(len(self.per_trial[cols[0]])):
                w.writerow([k] + [repr(float(self.per_trial[c][k])) for c in cols])


def make_step_schedule(step_base, num_steps):
    """s_k = step_base / k for k = 1..num_steps."""
    if step_base <= 0:
        raise ValueError("step_base must be positive")
    if num_steps < 1:
        raise ValueError("num_steps must be at least 1")
    return step_base / np.arange(1, num_steps + 1, dtype=np.float64)


def optimal_weight(config: RegressionConfig, outputs=None):
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    shape = config.dim if outputs is None else (config.dim, outputs)
    return rng.standard_normal(shape)


def _trial_stream(config, trial_index, outputs=None):
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(trial_index,)))
    images = rng.standard_normal((config.max_steps, config.dim))
    noise_shape = config.max_steps if outputs is None else (config.max_steps, outputs)
    noise = rng.standard_normal(noise_shape) * config.sigma
    return images, noise


def _run_batch(config, w_star, images, noise, template):
    """SGD over a batch of independent trials.

    images: (N, T, d); noise: (N, T).  Returns final weights (N, d) and the
    per-trial variance of the gradient scalar ``upsilon`` (gradient = upsilon * i).
    """
    n = images.shape[0]
    steps = make_step_schedule(config.step_base, config.max_steps)
    labels = images @ w_star + noise
    w = np.zeros((n, config.dim))
    ups = np.empty((n, config.max_steps))
    for k in range(config.max_steps):
        i_k = images[:, k, :]
        resid = template * np.einsum("nd,nd->n", w, i_k) - labels[:, k]
        u = template * resid
        ups[:, k] = u
        w -= steps[k] * u[:, None] * i_k
    return w, ups.var(axis=1)


def _simulate(config, proactive, trial_indices):
    w_star = optimal_weight(config)
    template = config.template_scalar if proactive else 1.0
    finals, variances = [], []
    for start in range(0, len(trial_indices), BATCH_TRIALS):
        chunk = trial_indices[start:start + BATCH_TRIALS]
        streams = [_trial_stream(config, t) for t in chunk]
        imgs = np.stack([s[0] for s in streams])
        noise = np.stack([s[1] for s in streams])
        w, v = _run_batch(config, w_star, imgs, noise, template)
        finals.append(w)
        variances.append(v)
    return w_star, np.concatenate(finals), np.concatenate(variances)


def simulate_sgd_trial(config: RegressionConfig, trial_index: int, proactive: bool) -> TrialResult:
    w_star, w, v = _simulate(config, proactive, [trial_index])
    return TrialResult(w[0], float(np.linalg.norm(w[0] - w_star)), float(v[0]))


def simulate_trials(config: RegressionConfig, proactive: bool):
    """All ``config.trials`` trials, in trial-index order."""
    w_star, w, v = _simulate(config, proactive, list(range(config.trials)))
    return [TrialResult(w[k], float(np.linalg.norm(w[k] - w_star)), float(v[k])) for k in range(len(w))]


def gradient_noise_variance(config: RegressionConfig, samples=10_000, trial_index=0):
    """Empirical variance of the proactive gradient scalar at converged weights.

    The weights come from one full proactive trial; ``samples`` fresh
    ``(i, e)`` draws (an independent stream) then give
    ``upsilon' = s (s w.i - w*.i - e)``, whose sample variance is returned.
    """
    if samples < 2:
        raise ValueError("need at least two samples")
    w_star, w, _ = _simulate(config, True, [trial_index])
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(trial_index, 3)))
    images = rng.standard_normal((samples, config.dim))
    noise = rng.standard_normal(samples) * config.sigma
    s = config.template_scalar
    ups = s * (s * images @ w[0] - (images @ w_star + noise))
    return float(ups.var(ddof=1))


def lemma1_compare(config: RegressionConfig) -> ConvergenceReport:
    if config.trials < 30:
        raise ValueError("lemma1_compare needs at least 30 trials")
    w_star, w_p, v_p = _simulate(config, False, list(range(config.trials)))
    _, w_a, v_a = _simulate(config, True, list(range(config.trials)))
    d_p = np.linalg.norm(w_p - w_star, axis=1)
    d_a = np.linalg.norm(w_a - w_star, axis=1)
    d_eff = np.linalg.norm(config.template_scalar * w_a - w_star, axis=1)
    diff = d_a - d_p
    if np.all(diff == diff[0]):
        p_value = 1.0 if diff[0] == 0 else 0.0
    else:
        p_value = float(stats.ttest_rel(d_a, d_p).pvalue)
    if not math.isfinite(p_value):
        p_value = 1.0
    if p_value < config.significance and diff.mean() < 0:
        verdict = Verdict.LEMMA_HOLDS
    elif p_value < config.significance and diff.mean() > 0:
        verdict = Verdict.LEMMA_VIOLATED
    else:
        verdict = Verdict.INCONCLUSIVE
    s, sig2 = config.template_scalar, config.sigma ** 2
    return ConvergenceReport(
        passive_mean_distance=float(d_p.mean()),
        proactive_mean_distance=float(d_a.mean()),
        passive_variance_bound=sig2,
        proactive_variance_bound=s ** 4 * sig2,
        p_value=p_value,
        verdict=verdict,
        passive_variance_estimate=float(v_p.mean()),
        proactive_variance_estimate=float(v_a.mean()),
        per_trial={
            "passive_distance": d_p,
            "proactive_distance": d_a,
            "proactive_effective_distance": d_eff,
            "passive_gradient_variance": v_p,
            "proactive_gradient_variance": v_a,
        },
    )


# -- box regression: the AP consequence ---------------------------------------

@dataclass
class BoxTaskSpec:
    """Linear regression from an image vector to (x1, y1, x2, y2).

    Ground truth for image ``i`` is ``base_box + W*^T i``; training labels add
    ``N(0, sigma^2)`` noise per coordinate.  Test images whose true box has
    invalid ordering are redrawn.
    """
    base_box: tuple = (24.0, 24.0, 40.0, 40.0)
    test_boxes: int = 500
    train_steps: int | None = None  # None -> config.max_steps
    thresholds: tuple = (0.5, 0.75)


@dataclass
class TheoremReport:
    ap_passive: dict
    ap_proactive: dict
    degenerate_passive: int
    degenerate_proactive: int

    @property
    def proactive_not_worse(self):
        return all(self.ap_proactive[t] >= self.ap_passive[t] for t in self.ap_passive)


def _train_box_regressor(config, w_star, template, steps):
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0, 1)))
    images = rng.standard_normal((steps, config.dim))
    noise = rng.standard_normal((steps, 4)) * config.sigma
    labels = images @ w_star + noise
    sched = make_step_schedule(config.step_base, max(steps, 1))
    w = np.zeros((config.dim, 4))
    for k in range(steps):
        i_k = images[k]
        resid = template * (i_k @ w) - labels[k]
        w -= sched[k] * template * np.outer(i_k, resid)
    return w


def _to_detection(coords, image_id):
    x1, y1, x2, y2 = (float(v) for v in coords)
    box = BBox(x1, y1, x2, y2) if (x2 > x1 and y2 > y1) else None
    return Detection(box, 0, 1.0, image_id)


def theorem1_check(config: RegressionConfig, box_task: BoxTaskSpec | None = None) -> TheoremReport:
    box_task = box_task or BoxTaskSpec()
    steps = config.max_steps if box_task.train_steps is None else box_task.train_steps
    w_star = optimal_weight(config, outputs=4)
    base = np.asarray(box_task.base_box, dtype=np.float64)
    w_pas = _train_box_regressor(config, w_star, 1.0, steps)
    w_pro = _train_box_regressor(config, w_star, config.template_scalar, steps)

    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0, 2)))
    tests = []
    while len(tests) < box_task.test_boxes:
        i = rng.standard_normal(config.dim)
        gt = base + i @ w_star
        if gt[2] > gt[0] and gt[3] > gt[1]:
            tests.append((i, gt))
    gts = [GroundTruth(BBox(*g), 0, k) for k, (_, g) in enumerate(tests)]
    dets_pas = [_to_detection(base + i @ w_pas, k) for k, (i, _) in enumerate(tests)]
    dets_pro = [_to_detection(base + config.template_scalar * (i @ w_pro), k) for k, (i, _) in enumerate(tests)]
    ap_pas = {t: average_precision(dets_pas, gts, t) for t in box_task.thresholds}
    ap_pro = {t: average_precision(dets_pro, gts, t) for t in box_task.thresholds}
    return TheoremReport(
        ap_pas, ap_pro,
        sum(d.box is None for d in dets_pas),
        sum(d.box is None for d in dets_pro),
    )
