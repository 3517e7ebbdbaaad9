"""Conditional GAN over flow images: nets, training loop, sampling.

The generator embeds the condition label, projects it to a 1x4x4 plane,
projects a 4096-d standard-normal latent to 127x4x4, concatenates to
128x4x4 and upsamples through four stride-2 transposed convolutions to
a 1x64x64 image (tanh output mapped to [0, 1]). The discriminator
projects the same label to a 1x64x64 plane, stacks it with the image
into 2x64x64, and runs four stride-2 convolutions down to a sigmoid
scalar. An unconditional mode collapses the vocabulary to one label and
serves as the no-conditioning baseline.

Shape contracts are asserted on every forward pass. Training is a pure
function of (dataset order, config, seed).
"""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass, field

import numpy as np

from .codec import IMG_SIZE, FlowImage
from .errors import (
    DatasetMismatch,
    DivergenceDetected,
    EmptyDataset,
    NonFiniteValue,
    ShapeMismatch,
    UnknownCondition,
)
from .tensorgrad import (
    BatchNormState,
    Parameter,
    Tensor,
    adam_step,
    affine,
    backward,
    batchnorm2d,
    bce_loss,
    concat,
    conv2d,
    conv_transpose2d,
    embedding,
    leaky_relu,
    linear,
    relu,
    reshape,
    sigmoid,
    tanh,
    zero_grad,
)

log = logging.getLogger("flowgan.model")

LATENT_DIM = 4096
EMBED_DIM = 16
SEED_SPATIAL = 4  # 4x4 feature map entering the upsampling stack
GEN_CHANNELS = (128, 128, 64, 32, 1)
DISC_CHANNELS = (2, 32, 64, 128, 128)
KERNEL = 4
STRIDE = 2
PADDING = 1
LEAKY_SLOPE = 0.2
INIT_STD = 0.02

MODE_CONDITIONAL = "conditional"
MODE_UNCONDITIONAL = "unconditional"
UNCONDITIONAL_LABEL = "all"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 16
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    label_smooth: float = 0.0


@dataclass(frozen=True)
class ConditionVocab:
    labels: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels) or not self.labels:
            raise DatasetMismatch(f"condition labels must be unique and nonempty: {self.labels}")

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise UnknownCondition(f"{label!r} not in vocabulary {self.labels}") from None

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class ConditionedSample:
    image: FlowImage
    condition: str
    day: dt.date | None = None
    group: int | None = None


def _expect(t: Tensor, shape: tuple) -> None:
    if t.data.shape != shape:
        raise ShapeMismatch(f"expected shape {shape}, got {t.data.shape}")


class _Net:
    """Common parameter/buffer bookkeeping for both networks."""

    prefix = ""

    def __init__(self):
        self.params: dict[str, Parameter] = {}
        self.states: dict[str, BatchNormState] = {}

    def _param(self, name: str, data: np.ndarray) -> Parameter:
        p = Parameter(data, name=f"{self.prefix}.{name}")
        self.params[name] = p
        return p

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())


class GeneratorNet(_Net):
    prefix = "g"

    def __init__(self, vocab_size: int, rng: np.random.Generator):
        super().__init__()
        s = SEED_SPATIAL
        cond_feats = s * s                      # 1 x 4 x 4 condition plane
        lat_feats = (GEN_CHANNELS[0] - 1) * s * s   # 127 x 4 x 4 latent block
        self._param("embed", rng.normal(0.0, INIT_STD, (vocab_size, EMBED_DIM)))
        self._param("cond_w", rng.normal(0.0, INIT_STD, (EMBED_DIM, cond_feats)))
        self._param("cond_b", np.zeros(cond_feats))
        self._param("lat_w", rng.normal(0.0, INIT_STD, (LATENT_DIM, lat_feats)))
        self._param("lat_b", np.zeros(lat_feats))
        for i in range(4):
            self._param(f"ct{i + 1}",
                        rng.normal(0.0, INIT_STD,
                                   (GEN_CHANNELS[i], GEN_CHANNELS[i + 1], KERNEL, KERNEL)))
            if i < 3:
                self._param(f"bn{i + 1}_gamma", rng.normal(1.0, INIT_STD, GEN_CHANNELS[i + 1]))
                self._param(f"bn{i + 1}_beta", np.zeros(GEN_CHANNELS[i + 1]))
                self.states[f"bn{i + 1}"] = BatchNormState(GEN_CHANNELS[i + 1])

    def forward(self, z: Tensor, cond_idx: np.ndarray, training: bool) -> Tensor:
        b = z.data.shape[0]
        s = SEED_SPATIAL
        _expect(z, (b, LATENT_DIM))
        c = linear(embedding(self.params["embed"], cond_idx),
                   self.params["cond_w"], self.params["cond_b"])
        c = reshape(c, (b, 1, s, s))
        _expect(c, (b, 1, s, s))
        h = linear(z, self.params["lat_w"], self.params["lat_b"])
        h = reshape(h, (b, GEN_CHANNELS[0] - 1, s, s))
        _expect(h, (b, GEN_CHANNELS[0] - 1, s, s))
        x = concat([h, c], axis=1)
        _expect(x, (b, GEN_CHANNELS[0], s, s))
        for i in range(4):
            x = conv_transpose2d(x, self.params[f"ct{i + 1}"], STRIDE, PADDING)
            if i < 3:
                x = batchnorm2d(x, self.params[f"bn{i + 1}_gamma"],
                                self.params[f"bn{i + 1}_beta"],
                                self.states[f"bn{i + 1}"], training)
                x = relu(x)
        x = affine(tanh(x), 0.5, 0.5)  # tanh range (-1,1) -> image range (0,1)
        _expect(x, (b, 1, IMG_SIZE, IMG_SIZE))
        return x


class DiscriminatorNet(_Net):
    prefix = "d"

    def __init__(self, vocab_size: int, rng: np.random.Generator):
        super().__init__()
        flat = DISC_CHANNELS[-1] * SEED_SPATIAL * SEED_SPATIAL
        self._param("embed", rng.normal(0.0, INIT_STD, (vocab_size, EMBED_DIM)))
        self._param("cond_w", rng.normal(0.0, INIT_STD, (EMBED_DIM, IMG_SIZE * IMG_SIZE)))
        self._param("cond_b", np.zeros(IMG_SIZE * IMG_SIZE))
        for i in range(4):
            self._param(f"conv{i + 1}",
                        rng.normal(0.0, INIT_STD,
                                   (DISC_CHANNELS[i + 1], DISC_CHANNELS[i], KERNEL, KERNEL)))
            if i > 0:  # DCGAN convention: no batchnorm on the first conv
                self._param(f"bn{i + 1}_gamma", rng.normal(1.0, INIT_STD, DISC_CHANNELS[i + 1]))
                self._param(f"bn{i + 1}_beta", np.zeros(DISC_CHANNELS[i + 1]))
                self.states[f"bn{i + 1}"] = BatchNormState(DISC_CHANNELS[i + 1])
        self._param("fc_w", rng.normal(0.0, INIT_STD, (flat, 1)))
        self._param("fc_b", np.zeros(1))

    def forward(self, img: Tensor, cond_idx: np.ndarray, training: bool) -> Tensor:
        b = img.data.shape[0]
        _expect(img, (b, 1, IMG_SIZE, IMG_SIZE))
        plane = linear(embedding(self.params["embed"], cond_idx),
                       self.params["cond_w"], self.params["cond_b"])
        plane = reshape(plane, (b, 1, IMG_SIZE, IMG_SIZE))
        x = concat([img, plane], axis=1)
        _expect(x, (b, 2, IMG_SIZE, IMG_SIZE))
        for i in range(4):
            x = conv2d(x, self.params[f"conv{i + 1}"], STRIDE, PADDING)
            if i > 0:
                x = batchnorm2d(x, self.params[f"bn{i + 1}_gamma"],
                                self.params[f"bn{i + 1}_beta"],
                                self.states[f"bn{i + 1}"], training)
            x = leaky_relu(x, LEAKY_SLOPE)
        _expect(x, (b, DISC_CHANNELS[-1], SEED_SPATIAL, SEED_SPATIAL))
        x = reshape(x, (b, DISC_CHANNELS[-1] * SEED_SPATIAL * SEED_SPATIAL))
        x = sigmoid(linear(x, self.params["fc_w"], self.params["fc_b"]))
        _expect(x, (b, 1))
        return x


@dataclass
class GanModel:
    """A generator/discriminator pair plus everything needed to reuse it."""

    mode: str
    vocab: ConditionVocab
    scale: float
    active_sizes: dict[str, int]
    gen: GeneratorNet
    disc: DiscriminatorNet
    rng: np.random.Generator
    step: int = 0

    @classmethod
    def fresh(cls, mode: str, vocab: ConditionVocab, scale: float,
              active_sizes: dict[str, int], seed: int) -> "GanModel":
        rng = np.random.default_rng(seed)
        gen = GeneratorNet(len(vocab), rng)
        disc = DiscriminatorNet(len(vocab), rng)
        return cls(mode=mode, vocab=vocab, scale=scale, active_sizes=dict(active_sizes),
                   gen=gen, disc=disc, rng=rng)


# --- training ----------------------------------------------------------------

def _prepare(dataset, mode: str, vocab: ConditionVocab | None):
    if not dataset:
        raise EmptyDataset("training needs at least one sample")
    scales = {s.image.scale for s in dataset}
    if len(scales) != 1:
        raise DatasetMismatch(f"samples carry {len(scales)} different codec scales")
    if mode == MODE_UNCONDITIONAL:
        vocab = ConditionVocab((UNCONDITIONAL_LABEL,))
        conds = np.zeros(len(dataset), dtype=np.int64)
        active = {UNCONDITIONAL_LABEL: max(s.image.n for s in dataset)}
    else:
        if vocab is None:
            vocab = ConditionVocab(tuple(sorted({s.condition for s in dataset})))
        conds = np.array([vocab.index(s.condition) for s in dataset], dtype=np.int64)
        active = {}
        for s in dataset:
            active[s.condition] = max(active.get(s.condition, 0), s.image.n)
        for label in vocab.labels:
            active.setdefault(label, IMG_SIZE)
    images = np.stack([s.image.pixels for s in dataset])[:, None, :, :]
    return vocab, conds, active, images, scales.pop()


def train(dataset, config: TrainConfig, seed: int,
          vocab: ConditionVocab | None = None, mode: str = MODE_CONDITIONAL,
          resume=None):
    """Adversarial training; returns (checkpoint, per-epoch loss log).

    Alternates a discriminator update on a real batch (target 1.0) and a
    generated batch (target 0.0) with a non-saturating generator update
    (generated batch scored against 1.0), using Adam. Deterministic
    given (dataset order, config, seed). When `resume` is a checkpoint,
    the model, optimizer, and RNG state continue from it and `seed` is
    ignored. Raises DivergenceDetected carrying the last epoch-end
    checkpoint if a loss goes non-finite.
    """
    from . import checkpoint as ckpt_io

    vocab, conds, active, images, scale = _prepare(dataset, mode, vocab)
    if resume is not None:
        if resume.mode != mode:
            raise DatasetMismatch(
                f"resume checkpoint is {resume.mode}, training mode is {mode}")
        model = ckpt_io.restore_model(resume)
    else:
        model = GanModel.fresh(mode, vocab, scale, active, seed)
    m = len(dataset)
    d_params = model.disc.parameters()
    g_params = model.gen.parameters()
    losses: list[tuple[int, float, float]] = []
    last_good = ckpt_io.snapshot(model)

    for epoch in range(config.epochs):
        order = model.rng.permutation(m)
        d_sum = 0.0
        g_sum = 0.0
        batches = 0
        try:
            for start in range(0, m, config.batch_size):
                batch = order[start:start + config.batch_size]
                idx = conds[batch]
                real = Tensor(images[batch])
                z = model.rng.standard_normal((batch.size, LATENT_DIM))
                fake = model.gen.forward(Tensor(z), idx, training=True)

                zero_grad(d_params)
                p_real = model.disc.forward(real, idx, training=True)
                p_fake = model.disc.forward(fake.detach(), idx, training=True)
                d_loss = bce_loss(p_real, 1.0 - config.label_smooth) + \
                    bce_loss(p_fake, 0.0)
                backward(d_loss)
                adam_step(d_params, config.lr, config.beta1, config.beta2)

                zero_grad(g_params)
                p_fake2 = model.disc.forward(fake, idx, training=True)
                g_loss = bce_loss(p_fake2, 1.0)
                backward(g_loss)
                adam_step(g_params, config.lr, config.beta1, config.beta2)

                d_sum += float(d_loss.data)
                g_sum += float(g_loss.data)
                batches += 1
                model.step += 1
        except NonFiniteValue as exc:
            raise DivergenceDetected(
                f"non-finite values in epoch {epoch}: {exc}", last_good) from exc
        d_mean = d_sum / batches
        g_mean = g_sum / batches
        if not (np.isfinite(d_mean) and np.isfinite(g_mean)):
            raise DivergenceDetected(
                f"non-finite loss in epoch {epoch}: d={d_mean} g={g_mean}", last_good)
        losses.append((epoch, d_mean, g_mean))
        log.info("epoch %d: d_loss=%.4f g_loss=%.4f", epoch, d_mean, g_mean)
        last_good = ckpt_io.snapshot(model)

    return last_good, losses


def train_unconditional(dataset, config: TrainConfig, seed: int, resume=None):
    """Same pipeline with the condition pathway held at a single label."""
    return train(dataset, config, seed, mode=MODE_UNCONDITIONAL, resume=resume)


# --- inference ----------------------------------------------------------------

def _as_model(model_or_ckpt) -> GanModel:
    if isinstance(model_or_ckpt, GanModel):
        return model_or_ckpt
    from . import checkpoint as ckpt_io

    return ckpt_io.restore_model(model_or_ckpt)


def _mask_image(pixels: np.ndarray, n: int) -> np.ndarray:
    pixels = pixels.copy()
    pixels[n:, :] = 0.0
    pixels[:, n:] = 0.0
    np.fill_diagonal(pixels, 0.0)
    return pixels


def generate(model_or_ckpt, condition: str, seed: int | None = None) -> FlowImage:
    """Sample one conditional flow image (deterministic when seeded).

    Draws a 4096-d standard-normal latent, runs the generator in eval
    mode, zeroes the padding beyond the condition's active size and the
    diagonal, and attaches the checkpoint's codec scale.
    """
    model = _as_model(model_or_ckpt)
    idx = model.vocab.index(condition)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((1, LATENT_DIM))
    out = model.gen.forward(Tensor(z), np.array([idx]), training=False)
    n = model.active_sizes.get(condition, IMG_SIZE)
    return FlowImage(pixels=_mask_image(out.data[0, 0], n), n=n, scale=model.scale)


def generate_batch(model_or_ckpt, condition: str, count: int,
                   seed: int | None = None, batch_size: int = 32) -> list[FlowImage]:
    """Sample `count` images from one latent stream, batched for speed."""
    model = _as_model(model_or_ckpt)
    idx = model.vocab.index(condition)
    rng = np.random.default_rng(seed)
    n = model.active_sizes.get(condition, IMG_SIZE)
    images: list[FlowImage] = []
    remaining = count
    while remaining > 0:
        b = min(batch_size, remaining)
        z = rng.standard_normal((b, LATENT_DIM))
        out = model.gen.forward(Tensor(z), np.full(b, idx), training=False)
        for k in range(b):
            images.append(FlowImage(pixels=_mask_image(out.data[k, 0], n),
                                    n=n, scale=model.scale))
        remaining -= b
    return images


def discriminate(model_or_ckpt, image, condition: str) -> float:
    """Eval-mode discriminator confidence that `image` is real."""
    model = _as_model(model_or_ckpt)
    idx = model.vocab.index(condition)
    pixels = image.pixels if isinstance(image, FlowImage) else np.asarray(image, dtype=np.float64)
    if pixels.shape != (IMG_SIZE, IMG_SIZE):
        raise ShapeMismatch(f"expected {IMG_SIZE}x{IMG_SIZE} image, got {pixels.shape}")
    out = model.disc.forward(Tensor(pixels[None, None]), np.array([idx]), training=False)
    return float(out.data[0, 0])
