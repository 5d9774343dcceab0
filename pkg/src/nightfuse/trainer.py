"""Teacher-student self-training loop with an EMA teacher.

Each step draws a shared auxiliary modality (event map or content map),
computes the supervised source loss and the pseudo-labeled target loss on the
student, applies one SGD step, then updates the teacher as an exponential
moving average of the student.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .content import ContentParams, extract_content
from .core import (
    IGNORE,
    AllIgnored,
    GrayImage,
    InvalidParams,
    LabelMask,
    NonFiniteInput,
    NonFiniteLoss,
    SignedMap,
)
from .metrics import ConfusionMatrix, miou
from .model import ModelDims, ModelParams, forward, init_params, sgd_step, weighted_loss
from .motion import FilterParams, StyleHook, extract_motion, night_style_hook

CHOICE_EVENTS = "events"
CHOICE_CONTENT = "content"


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 2
    lam_image: float = 0.5
    lam_events: float = 0.25
    lam_content: float = 0.25
    lam_fused: float = 0.5
    sigma: float = 0.999          # EMA momentum of the teacher
    lr: float = 0.05
    seed: int = 0
    conf_threshold: float = 0.0   # pseudo-label confidence gate; 0 disables
    self_training: bool = True    # False trains on the labeled source only
    target_warmup: int = 0        # source-only steps before self-training starts,
                                  # standing in for a pretrained initialization
    modality: str = "both"        # both | events | content
    eval_interval: int = 0        # steps between held-out evaluations; 0 disables
    dims: ModelDims = field(default_factory=ModelDims)

    def __post_init__(self):
        if self.iterations < 0:
            raise InvalidParams(f"TrainConfig: iterations must be >= 0, got {self.iterations}")
        if self.batch_size < 1:
            raise InvalidParams(f"TrainConfig: batch_size must be >= 1, got {self.batch_size}")
        if min(self.lam_image, self.lam_events, self.lam_content, self.lam_fused) < 0:
            raise InvalidParams("TrainConfig: lambda weights must be >= 0")
        if not 0.0 <= self.sigma <= 1.0:
            raise InvalidParams(f"TrainConfig: sigma must be in [0, 1], got {self.sigma}")
        if not 0.0 <= self.conf_threshold <= 1.0:
            raise InvalidParams(f"TrainConfig: conf_threshold must be in [0, 1], got {self.conf_threshold}")
        if self.modality not in (CHOICE_EVENTS, CHOICE_CONTENT, "both"):
            raise InvalidParams(f"TrainConfig: modality must be both|events|content, got {self.modality!r}")
        if self.target_warmup < 0:
            raise InvalidParams(f"TrainConfig: target_warmup must be >= 0, got {self.target_warmup}")


@dataclass(frozen=True)
class SourceSample:
    """Labeled daytime sample: image, styled pseudo-events, content map, labels."""

    image: GrayImage
    pseudo_events: SignedMap
    content: SignedMap
    labels: LabelMask


@dataclass(frozen=True)
class TargetSample:
    """Unlabeled nighttime sample: image, event map, content map."""

    image: GrayImage
    events: SignedMap
    content: SignedMap


@dataclass(frozen=True)
class StepReport:
    loss_source: float
    loss_target: Optional[float]
    choice: str


@dataclass(frozen=True)
class StepRecord:
    step: int
    loss_source: float
    loss_target: Optional[float]
    choice: str


@dataclass(frozen=True)
class EvalRecord:
    step: int
    miou_fused: float
    miou_image: float


@dataclass
class TrainingLog:
    steps: List[StepRecord] = field(default_factory=list)
    evals: List[EvalRecord] = field(default_factory=list)


@dataclass(frozen=True)
class TrainResult:
    student: ModelParams
    teacher: ModelParams
    log: TrainingLog


def pseudo_label(teacher: ModelParams, sample: TargetSample, choice: str,
                 conf_threshold: float = 0.0) -> LabelMask:
    """Argmax of the teacher's fused head; low-confidence pixels become IGNORE.

    Ties resolve to the lowest class id.
    """
    aux = sample.events if choice == CHOICE_EVENTS else sample.content
    probs = forward(sample.image, aux, teacher).p_fused.probs
    ids = probs.argmax(axis=2).astype(np.int32)
    if conf_threshold > 0.0:
        ids = np.where(probs.max(axis=2) < conf_threshold, np.int32(IGNORE), ids)
    return LabelMask(sample.image.width, sample.image.height, ids, teacher.dims.classes)


def _batch_loss(params: ModelParams, triples, lam_image, lam_aux, lam_fused):
    """Mean loss and gradient over (image, aux, labels) triples; all-IGNORE samples contribute zero."""
    total = 0.0
    grad = np.zeros(params.dims.vector_length())
    used = 0
    for image, aux, labels in triples:
        try:
            loss, g, _ = weighted_loss(image, aux, labels, params, lam_image, lam_aux, lam_fused)
        except AllIgnored:
            continue
        total += loss
        grad += g
        used += 1
    if used == 0:
        return 0.0, grad
    return total / used, grad / used


def train_step(
    student: ModelParams,
    teacher: ModelParams,
    src_batch: Sequence[SourceSample],
    tgt_batch: Sequence[TargetSample],
    cfg: TrainConfig,
    choice: str,
    in_warmup: bool = False,
) -> Tuple[ModelParams, ModelParams, StepReport]:
    """One optimization step; the modality choice is shared by both domains.

    During warmup only the per-modality heads train (the fusion module stays
    at its initialization, like the fresh fusion module on top of a pretrained
    network) and the target loss is skipped.
    """
    lam_aux = cfg.lam_events if choice == CHOICE_EVENTS else cfg.lam_content
    lam_fused = 0.0 if in_warmup else cfg.lam_fused

    src_triples = [
        (s.image, s.pseudo_events if choice == CHOICE_EVENTS else s.content, s.labels)
        for s in src_batch
    ]
    loss_src, grad = _batch_loss(student, src_triples, cfg.lam_image, lam_aux, lam_fused)

    loss_tgt: Optional[float] = None
    if cfg.self_training and not in_warmup:
        tgt_triples = []
        for s in tgt_batch:
            labels = pseudo_label(teacher, s, choice, cfg.conf_threshold)
            aux = s.events if choice == CHOICE_EVENTS else s.content
            tgt_triples.append((s.image, aux, labels))
        loss_tgt, grad_tgt = _batch_loss(student, tgt_triples, cfg.lam_image, lam_aux, lam_fused)
        grad = grad + grad_tgt

    losses = [loss_src] + ([loss_tgt] if loss_tgt is not None else [])
    if not all(np.isfinite(v) for v in losses) or not np.isfinite(grad).all():
        raise NonFiniteLoss(
            f"non-finite loss or gradient (loss_source={loss_src}, loss_target={loss_tgt})"
        )

    try:
        student = sgd_step(student, grad, cfg.lr)
        teacher = teacher.with_vector(cfg.sigma * teacher.vector + (1.0 - cfg.sigma) * student.vector)
    except NonFiniteInput as err:
        raise NonFiniteLoss(
            f"non-finite parameter update with lr={cfg.lr} "
            f"(loss_source={loss_src}, loss_target={loss_tgt}): {err}"
        ) from err
    return student, teacher, StepReport(loss_src, loss_tgt, choice)


class _Sampler:
    """Epoch-shuffled index sampler; reshuffles from the shared rng when exhausted."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.cursor = 0

    def take(self, count: int) -> List[int]:
        out = []
        while len(out) < count:
            if self.cursor >= self.n:
                self.order = self.rng.permutation(self.n)
                self.cursor = 0
            out.append(int(self.order[self.cursor]))
            self.cursor += 1
        return out


def draw_choice(rng: np.random.Generator, modality: str = "both") -> str:
    """Fair-coin modality draw, optionally pinned to one modality."""
    if modality == CHOICE_EVENTS:
        return CHOICE_EVENTS
    if modality == CHOICE_CONTENT:
        return CHOICE_CONTENT
    return CHOICE_EVENTS if rng.random() < 0.5 else CHOICE_CONTENT


def predict(params: ModelParams, image: GrayImage, aux: SignedMap, head: str = "fused") -> LabelMask:
    """Argmax prediction of the requested head as a LabelMask."""
    probs = forward(image, aux, params)
    chosen = {"fused": probs.p_fused, "image": probs.p_image, "aux": probs.p_aux}.get(head)
    if chosen is None:
        raise InvalidParams(f"predict: head must be fused|image|aux, got {head!r}")
    ids = chosen.probs.argmax(axis=2).astype(np.int32)
    return LabelMask(image.width, image.height, ids, params.dims.classes)


def evaluate(
    params: ModelParams,
    samples: Sequence[TargetSample],
    labels: Sequence[LabelMask],
    head: str = "fused",
    aux: str = CHOICE_EVENTS,
) -> float:
    """MIoU of the requested head over a labeled split."""
    cm = ConfusionMatrix(params.dims.classes)
    for sample, gt in zip(samples, labels):
        aux_map = sample.events if aux == CHOICE_EVENTS else sample.content
        cm.add(gt, predict(params, sample.image, aux_map, head))
    return miou(cm)


def train(
    cfg: TrainConfig,
    source: Sequence[SourceSample],
    target: Sequence[TargetSample],
    eval_samples: Optional[Sequence[TargetSample]] = None,
    eval_labels: Optional[Sequence[LabelMask]] = None,
) -> TrainResult:
    """Run the full loop from a seeded init; returns final student, teacher, and log.

    Per-step rng draw order: source indices, target indices, modality choice.
    """
    if len(source) == 0 or len(target) == 0:
        raise InvalidParams("train: source and target datasets must be non-empty")
    student = init_params(cfg.dims, cfg.seed)
    teacher = student
    rng = np.random.default_rng(cfg.seed)
    src_sampler = _Sampler(len(source), rng)
    tgt_sampler = _Sampler(len(target), rng)
    log = TrainingLog()

    for step in range(cfg.iterations):
        src_batch = [source[i] for i in src_sampler.take(cfg.batch_size)]
        tgt_batch = [target[i] for i in tgt_sampler.take(cfg.batch_size)]
        choice = draw_choice(rng, cfg.modality)
        try:
            student, teacher, report = train_step(
                student, teacher, src_batch, tgt_batch, cfg, choice,
                in_warmup=step < cfg.target_warmup,
            )
        except NonFiniteLoss as err:
            raise NonFiniteLoss(f"aborted at step {step}: {err}") from err
        log.steps.append(StepRecord(step, report.loss_source, report.loss_target, report.choice))

        if (
            cfg.eval_interval > 0
            and eval_samples is not None
            and eval_labels is not None
            and (step + 1) % cfg.eval_interval == 0
        ):
            log.evals.append(EvalRecord(
                step,
                evaluate(student, eval_samples, eval_labels, head="fused"),
                evaluate(student, eval_samples, eval_labels, head="image"),
            ))
    return TrainResult(student, teacher, log)


# ---------------------------------------------------------------------------
# Synthetic day/night scenario
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    source: List[SourceSample]
    source_prev: List[GrayImage]        # previous frames, kept so datasets can be exported
    target: List[TargetSample]
    target_labels: List[LabelMask]      # held out; never used by train()
    eval_samples: List[TargetSample]
    eval_labels: List[LabelMask]
    num_classes: int
    width: int
    height: int


# Per-class mean fill intensities for shape classes 1..C-1; background stays near 0.35.
_SHAPE_LEVELS = [0.85, 0.15, 0.60, 0.72, 0.06]
_TEXTURE_AMP = 0.10
_TEXTURE_PERIOD = 4  # pixels per stripe cycle; a 5x5 patch sees a full cycle


def _stripes(xx, yy, cx, cy, orientation):
    """Class-coded +-1 stripe pattern anchored to the shape center so it moves with it."""
    if orientation == 0:
        coord = yy - round(cy)
    elif orientation == 1:
        coord = xx - round(cx)
    else:
        coord = (xx - round(cx)) + (yy - round(cy))
    half = _TEXTURE_PERIOD // 2
    return ((coord // half) % 2) * 2.0 - 1.0


def _render_scene(width, height, num_classes, centers, kinds, sizes, levels, bg):
    img = np.full((height, width), bg)
    labels = np.zeros((height, width), dtype=np.int32)
    yy, xx = np.mgrid[0:height, 0:width]
    for cls in range(1, num_classes):
        cx, cy = centers[cls - 1]
        if kinds[cls - 1] == 0:
            rx, ry = sizes[cls - 1]
            inside = (np.abs(xx - cx) <= rx) & (np.abs(yy - cy) <= ry)
        else:
            r = sizes[cls - 1][0]
            inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        fill = levels[cls - 1] + _TEXTURE_AMP * _stripes(xx, yy, cx, cy, (cls - 1) % 3)
        img[inside] = fill[inside]
        labels[inside] = cls
    return np.clip(img, 0.0, 1.0), labels


def _draw_scene(rng, width, height, num_classes):
    """One scene: per-class textured shapes in separate bands so no class vanishes."""
    bg = rng.uniform(0.30, 0.40)
    band = width / (num_classes - 1)
    centers, kinds, sizes, levels = [], [], [], []
    for cls in range(1, num_classes):
        cx = (cls - 1) * band + rng.uniform(0.3, 0.7) * band
        cy = rng.uniform(0.25, 0.75) * height
        centers.append((cx, cy))
        kinds.append(int(rng.integers(0, 2)))
        sizes.append((rng.uniform(4.0, 6.5), rng.uniform(4.0, 6.5)))
        levels.append(float(np.clip(
            _SHAPE_LEVELS[(cls - 1) % len(_SHAPE_LEVELS)] + rng.uniform(-0.02, 0.02), 0.0, 1.0)))
    return bg, centers, kinds, sizes, levels


def _scene_pair(rng, width, height, num_classes):
    """Current frame with labels plus a previous frame shifted 1-3 px on each axis.

    The shift is redrawn until every stripe orientation changes between the
    frames (a diagonal pattern is static when dx + dy is a multiple of its
    period), so each class produces interior motion.
    """
    bg, centers, kinds, sizes, levels = _draw_scene(rng, width, height, num_classes)
    while True:
        dx = int(rng.integers(1, 4)) * (1 if rng.random() < 0.5 else -1)
        dy = int(rng.integers(1, 4)) * (1 if rng.random() < 0.5 else -1)
        if (dx + dy) % _TEXTURE_PERIOD != 0:
            break
    curr, labels = _render_scene(width, height, num_classes, centers, kinds, sizes, levels, bg)
    prev_centers = [(cx - dx, cy - dy) for cx, cy in centers]
    prev, _ = _render_scene(width, height, num_classes, prev_centers, kinds, sizes, levels, bg)
    return prev, curr, labels


def _darken(bright: np.ndarray, rng, floor: float, gain: float, crush: float,
            noise_sigma: float) -> np.ndarray:
    """Gamma/contrast crush toward a low-light floor plus additive sensor noise."""
    dark = floor + gain * np.power(bright, crush)
    dark = dark + rng.normal(0.0, noise_sigma, size=bright.shape)
    return np.clip(dark, 0.0, 1.0)


def make_synthetic_scenario(
    seed: int,
    n_source: int,
    n_target: int,
    n_eval: int = 32,
    width: int = 32,
    height: int = 32,
    num_classes: int = 4,
    filter_params: Optional[FilterParams] = None,
    gamma: int = 1,
    hook: Optional[StyleHook] = None,
    dark_floor: float = 0.0,
    dark_gain: float = 0.82,
    dark_crush: float = 1.2,
    noise_sigma: float = 0.05,
    source_noise_sigma: float = 0.02,
    source_gain_jitter: float = 0.15,
) -> Scenario:
    """Labeled bright source scenes plus darkened, noisy target scenes.

    Both domains carry camera grain on the stored images; motion maps are
    extracted from the clean frame pairs (for the target that is the
    pre-darkening pair, so events keep the contrast the dark images lose).
    """
    if min(n_source, n_target, n_eval) < 1:
        raise InvalidParams("make_synthetic_scenario: sample counts must be >= 1")
    if not 3 <= num_classes <= 6:
        raise InvalidParams(f"make_synthetic_scenario: num_classes must be in [3, 6], got {num_classes}")
    fp = filter_params or FilterParams()
    rng = np.random.default_rng(seed)

    source, source_prev = [], []
    for _ in range(n_source):
        prev, curr, labels = _scene_pair(rng, width, height, num_classes)
        prev_img = GrayImage(width, height, prev)
        curr_img = GrayImage(width, height, curr)
        e_me = extract_motion(prev_img, curr_img, fp)
        # Per-sample exposure jitter plus grain; the motion map is unaffected
        # (log differencing cancels a global gain).
        gain = rng.uniform(1.0 - source_gain_jitter, 1.0 + source_gain_jitter)
        noisy = GrayImage(width, height, np.clip(
            gain * curr + rng.normal(0.0, source_noise_sigma, size=curr.shape), 0.0, 1.0))
        cp = ContentParams(gamma, fp, int(rng.integers(0, 2 ** 31)))
        source.append(SourceSample(
            noisy,
            night_style_hook(e_me, hook),
            extract_content(noisy, cp),
            LabelMask(width, height, labels, num_classes),
        ))
        source_prev.append(prev_img)

    def target_sample():
        prev, curr, labels = _scene_pair(rng, width, height, num_classes)
        prev_img = GrayImage(width, height, prev)
        curr_img = GrayImage(width, height, curr)
        events = extract_motion(prev_img, curr_img, fp)
        dark = GrayImage(width, height, _darken(curr, rng, dark_floor, dark_gain, dark_crush, noise_sigma))
        cp = ContentParams(gamma, fp, int(rng.integers(0, 2 ** 31)))
        return (
            TargetSample(dark, events, extract_content(dark, cp)),
            LabelMask(width, height, labels, num_classes),
        )

    target, target_labels = [], []
    for _ in range(n_target):
        sample, labels = target_sample()
        target.append(sample)
        target_labels.append(labels)

    eval_samples, eval_labels = [], []
    for _ in range(n_eval):
        sample, labels = target_sample()
        eval_samples.append(sample)
        eval_labels.append(labels)

    return Scenario(source, source_prev, target, target_labels, eval_samples, eval_labels,
                    num_classes, width, height)
