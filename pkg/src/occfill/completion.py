"""Feature completion for occluded proposals.

Completion runs in two moves. Copy-paste overwrites the cells flagged by
the occlusion mask with the matched prototype's values, which restores
plausible content but leaves a seam between borrowed and original cells.
A small residual generator then refines the whole map: two channel-mixing
dense layers applied identically at every grid cell, added back onto the
input. Zero-initialized second-layer weights make the untrained generator
an exact identity, so training starts from plain copy-paste and learns
only the correction.

The generator trains against a discriminator that scores flattened maps
as visible-looking or not, under the usual two-player objective: the
discriminator ascends log D(visible) + log(1 - D(G(pasted))), the
generator descends log(1 - D(G(pasted))). Training is staged: first on
synthetic occlusions (masks applied to visible samples, compared against
the same sample's original), then on genuinely occluded samples compared
against randomly paired visible ones.

A separately trained logistic scoring head, fit on visible pedestrian
versus background features and frozen before adversarial training,
rescores occluded proposals from their completed features.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, PreconditionError, ShapeMismatchError
from .ndnum import DenseLayer, check_finite, clamp_prob, sgd_step, sigmoid
from .occlusion import OcclusionConfig, completion_mask, correlation_map
from .prototypes import FeaturePool, nearest_prototype
from .synth import MASK_PATTERNS, sample_mask

STAGES = ("synthetic", "real")
MODEL_MAGIC = b"FCGD"
MODEL_VERSION = 1
DISC_HIDDEN = 64
MIN_MASK_LIBRARY = 50


class Generator:
    """Residual per-cell refiner; identical channel mixing at every cell."""

    def __init__(self, mix, out):
        if mix.in_dim != mix.out_dim or out.in_dim != out.out_dim:
            raise PreconditionError("generator layers must be square")
        if mix.out_dim != out.in_dim:
            raise ShapeMismatchError("generator chain", (out.in_dim,), (mix.out_dim,))
        if mix.activation != "relu" or out.activation != "identity":
            raise PreconditionError("generator needs relu then identity layers")
        self.mix = mix
        self.out = out
        self._shape = None

    @classmethod
    def init(cls, channels, rng):
        """Start as an exact identity: zero second-layer weights and bias."""
        mix = DenseLayer.init(channels, channels, rng.split("mix"), "relu")
        out = DenseLayer(np.zeros((channels, channels)), np.zeros(channels), "identity")
        return cls(mix, out)

    @property
    def channels(self):
        return self.mix.in_dim

    def _columns(self, features):
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim == 3:
            c = feats.shape[0]
            cols = feats.reshape(c, -1)
        elif feats.ndim == 4:
            c = feats.shape[1]
            cols = np.moveaxis(feats, 1, 0).reshape(c, -1)
        else:
            raise PreconditionError("generator input must be (c, x, y) or (n, c, x, y)")
        if c != self.channels:
            raise ShapeMismatchError("generator input channels", (c,), (self.channels,))
        return cols, feats.shape

    def _restore(self, cols, shape):
        if len(shape) == 3:
            return cols.reshape(shape)
        moved = cols.reshape((shape[1], shape[0]) + shape[2:])
        return np.moveaxis(moved, 0, 1)

    def forward(self, features):
        """Refine one (c, x, y) map or a batch (n, c, x, y)."""
        cols, shape = self._columns(features)
        residual = self.out.forward(self.mix.forward(cols))
        self._shape = shape
        return self._restore(cols + residual, shape)

    def backward(self, upstream):
        """Parameter gradients for the latest forward; returns (grads, d_input)."""
        if self._shape is None:
            raise PreconditionError("backward called before forward")
        up_cols, _ = self._columns(upstream)
        g_out, d_mid = self.out.backward(up_cols)
        g_mix, d_in = self.mix.backward(d_mid)
        grads = [g_mix[0], g_mix[1], g_out[0], g_out[1]]
        return grads, self._restore(up_cols + d_in, self._shape)

    def params(self):
        return self.mix.params() + self.out.params()

    def set_params(self, params):
        self.mix.set_params(params[:2])
        self.out.set_params(params[2:])


class Discriminator:
    """Flattened feature map -> hidden relu layer -> sigmoid probability."""

    def __init__(self, hidden, readout):
        if hidden.activation != "relu" or readout.activation != "sigmoid":
            raise PreconditionError("discriminator needs relu then sigmoid layers")
        if readout.in_dim != hidden.out_dim or readout.out_dim != 1:
            raise ShapeMismatchError("discriminator chain", (readout.in_dim,), (hidden.out_dim,))
        self.hidden = hidden
        self.readout = readout

    @classmethod
    def init(cls, in_dim, rng, width=DISC_HIDDEN):
        # Zero readout keeps initial probabilities at exactly 0.5, so equal
        # real/fake batches produce cancelling gradients and the generator
        # receives no push until the pools genuinely differ.
        hidden = DenseLayer.init(in_dim, width, rng.split("hidden"), "relu")
        readout = DenseLayer(np.zeros((1, width)), np.zeros(1), "sigmoid")
        return cls(hidden, readout)

    @property
    def in_dim(self):
        return self.hidden.in_dim

    def forward(self, flat):
        """Probabilities for a (d,) vector or (d, n) column batch."""
        return self.readout.forward(self.hidden.forward(flat))

    def backward(self, upstream):
        g_read, d_mid = self.readout.backward(upstream)
        g_hidden, d_in = self.hidden.backward(d_mid)
        return [g_hidden[0], g_hidden[1], g_read[0], g_read[1]], d_in

    def params(self):
        return self.hidden.params() + self.readout.params()

    def set_params(self, params):
        self.hidden.set_params(params[:2])
        self.readout.set_params(params[2:])


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "synthetic"
    iterations: int = 2000
    disc_steps: int = 1
    batch_size: int = 32
    learn_rate: float = 2e-3

    def validate(self):
        if self.stage not in STAGES:
            raise PreconditionError(f"unknown stage {self.stage!r}")
        if self.iterations < 0:
            raise PreconditionError("iterations must be non-negative")
        if self.disc_steps < 1:
            raise PreconditionError("disc_steps must be at least 1")
        if self.batch_size < 1:
            raise PreconditionError("batch_size must be at least 1")
        if not (self.learn_rate > 0 and np.isfinite(self.learn_rate)):
            raise PreconditionError("learn_rate must be positive and finite")
        return self


def default_stage_configs():
    """The two-stage schedule: synthetic occlusions first, real ones after."""
    return (TrainConfig(stage="synthetic", learn_rate=2e-3),
            TrainConfig(stage="real", learn_rate=2e-4))


@dataclass
class FeaturePools:
    """Occluded-side and visible-side training features."""

    occluded: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        self.occluded = np.asarray(self.occluded, dtype=np.float64)
        self.visible = np.asarray(self.visible, dtype=np.float64)

    def validate(self):
        for name, pool in (("occluded", self.occluded), ("visible", self.visible)):
            if pool.ndim != 4:
                raise PreconditionError(f"{name} pool must be (n, c, x, y)")
            if pool.shape[0] == 0:
                raise PreconditionError(f"{name} pool is empty")
            check_finite(pool, f"{name} pool")
        if self.occluded.shape[1:] != self.visible.shape[1:]:
            raise ShapeMismatchError("pool features", self.visible.shape[1:],
                                     self.occluded.shape[1:])
        return self


def copy_paste(f_occ, prototype, mask):
    """Overwrite masked cells (all channels) with the prototype's values."""
    occ = np.asarray(f_occ, dtype=np.float64)
    proto = np.asarray(prototype, dtype=np.float64)
    if occ.shape != proto.shape:
        raise ShapeMismatchError("prototype features", proto, occ.shape)
    if occ.ndim != 3:
        raise PreconditionError("features must be (channels, x, y)")
    if mask.grid.shape != occ.shape[1:]:
        raise ShapeMismatchError("completion mask", mask.grid, occ.shape[1:])
    return np.where(mask.grid[None, :, :], proto, occ)


def generate(gen, pasted):
    """Run the generator's residual refinement on already-pasted features."""
    return gen.forward(pasted)


def adversarial_losses(d_vis, d_gen):
    """Mean two-player objectives from raw probabilities.

    Returns (disc_objective, gen_objective): the discriminator ascends
    log d_vis + log(1 - d_gen); the generator descends log(1 - d_gen).
    Probabilities are clamped away from 0 and 1 before the logs.
    """
    p_vis = clamp_prob(np.asarray(d_vis, dtype=np.float64))
    p_gen = clamp_prob(np.asarray(d_gen, dtype=np.float64))
    gen_term = np.log(1.0 - p_gen)
    disc_obj = float(np.mean(np.log(p_vis) + gen_term))
    gen_obj = float(np.mean(gen_term))
    return disc_obj, gen_obj


def _flatten_batch(batch):
    return batch.reshape(batch.shape[0], -1).T


def _disc_step(pools, gen, disc, m, rng, paired):
    """One discriminator ascent step; returns (objective, accuracy) pre-update."""
    n_occ = pools.occluded.shape[0]
    n_vis = pools.visible.shape[0]
    idx_occ = np.sort(rng.choice(n_occ, size=m, replace=False))
    idx_vis = idx_occ if paired else np.sort(rng.choice(n_vis, size=m, replace=False))
    vis = pools.visible[idx_vis]
    fake = gen.forward(pools.occluded[idx_occ])

    p_vis = disc.forward(_flatten_batch(vis))
    up_vis = 1.0 / (m * clamp_prob(p_vis))
    g_vis, _ = disc.backward(up_vis)

    p_fake = disc.forward(_flatten_batch(fake))
    up_fake = -1.0 / (m * (1.0 - clamp_prob(p_fake)))
    g_fake, _ = disc.backward(up_fake)

    objective, _ = adversarial_losses(p_vis, p_fake)
    accuracy = 0.5 * (float(np.mean(p_vis > 0.5)) + float(np.mean(p_fake < 0.5)))
    grads = [a + b for a, b in zip(g_vis, g_fake)]
    return objective, accuracy, grads


def _gen_step(pools, gen, disc, m, rng):
    """One generator descent step; returns the pre-update objective."""
    idx = np.sort(rng.choice(pools.occluded.shape[0], size=m, replace=False))
    fake = gen.forward(pools.occluded[idx])
    p_fake = disc.forward(_flatten_batch(fake))
    _, objective = adversarial_losses(1.0, p_fake)

    up_prob = -1.0 / (m * (1.0 - clamp_prob(p_fake)))
    _, d_flat = disc.backward(up_prob)
    d_fake = d_flat.T.reshape(fake.shape)
    grads, _ = gen.backward(d_fake)
    return objective, grads


def train_adversarial(pools, gen, disc, config, rng, paired=False, start_iteration=0):
    """Alternate discriminator ascent and generator descent steps.

    Every iteration runs ``disc_steps`` discriminator updates, each on a
    fresh minibatch drawn uniformly without replacement from each pool,
    followed by one generator update on its own fresh minibatch. With
    ``paired`` the two pools must align index-to-index and each minibatch
    uses the same indices on both sides. History rows carry
    (iteration, disc_objective, gen_objective, probe_accuracy), with the
    objectives and the discriminator's minibatch accuracy measured just
    before the corresponding update. Both networks are updated in place
    and returned.
    """
    pools.validate()
    config.validate()
    m = config.batch_size
    if m > pools.occluded.shape[0] or m > pools.visible.shape[0]:
        raise PreconditionError(
            f"batch_size {m} exceeds a pool size "
            f"({pools.occluded.shape[0]} occluded, {pools.visible.shape[0]} visible)")
    if paired and pools.occluded.shape[0] != pools.visible.shape[0]:
        raise PreconditionError("paired training needs pools of equal length")

    history = []
    for t in range(config.iterations):
        it_rng = rng.split(f"iter-{start_iteration + t}")
        disc_obj = accuracy = 0.0
        for k in range(config.disc_steps):
            disc_obj, accuracy, grads = _disc_step(
                pools, gen, disc, m, it_rng.split(f"disc-{k}"), paired)
            disc.set_params(sgd_step(disc.params(), grads, config.learn_rate, "ascend"))
        gen_obj, grads = _gen_step(pools, gen, disc, m, it_rng.split("gen"))
        gen.set_params(sgd_step(gen.params(), grads, config.learn_rate, "descend"))
        history.append((start_iteration + t + 1, disc_obj, gen_obj, accuracy))
    return gen, disc, history


def mask_library(occluded_pool, bank, occ_config=OcclusionConfig()):
    """Masks observed on real occluded samples, via their completion masks.

    Empty masks are dropped: a sample whose correlation map flags nothing
    contributes no occlusion pattern worth imitating.
    """
    masks = []
    for feats, scale in zip(occluded_pool.features, occluded_pool.scales):
        proto = nearest_prototype(bank, float(scale))
        cmap = correlation_map(feats, proto.center)
        mask = completion_mask(cmap, occ_config)
        if mask.count > 0:
            masks.append(mask)
    return masks


def _paste_pool(pool, bank, occ_config):
    """Completion-masked copy-paste for every sample in a feature pool."""
    pasted = np.empty_like(pool.features)
    for i, (feats, scale) in enumerate(zip(pool.features, pool.scales)):
        proto = nearest_prototype(bank, float(scale))
        cmap = correlation_map(feats, proto.center)
        mask = completion_mask(cmap, occ_config)
        pasted[i] = copy_paste(feats, proto.center, mask)
    return pasted


def progressive_train(visible_pool, real_occluded_pool, bank, occ_config,
                      stage_configs, rng, mask_world=None):
    """Two-stage adversarial training; returns (generator, discriminator, history).

    Stage one mimics occlusion on known-good data: every visible sample
    gets a mask drawn from the library of masks observed on the real
    occluded pool, prototype values pasted into those cells, and the
    result is trained against the same sample's original features. Stage
    two switches to the real occluded pool, copy-pasted the same way and
    trained against randomly paired visible samples. Generator and
    discriminator parameters carry over between stages.

    When fewer than 50 observed masks exist and ``mask_world`` is given,
    the library is topped up with synthetic mask patterns drawn from that
    world; with no world and no observed masks at all, training refuses
    to start.
    """
    configs = [c.validate() for c in stage_configs]
    if len(configs) != 2 or configs[0].stage != "synthetic" or configs[1].stage != "real":
        raise PreconditionError("stage_configs must be (synthetic, real)")

    lib = mask_library(real_occluded_pool, bank, occ_config)
    if len(lib) < MIN_MASK_LIBRARY and mask_world is not None:
        top_rng = rng.split("mask-top-up")
        for i in range(MIN_MASK_LIBRARY - len(lib)):
            pattern = MASK_PATTERNS[i % len(MASK_PATTERNS)]
            lib.append(sample_mask(mask_world, pattern, top_rng.split(f"m{i}")))
    if not lib:
        raise PreconditionError("empty mask library: no occlusion patterns to imitate")

    channels = visible_pool.features.shape[1]
    gen = Generator.init(channels, rng.split("generator"))
    disc = Discriminator.init(int(np.prod(visible_pool.features.shape[1:])),
                              rng.split("discriminator"))

    pick = rng.split("stage1-masks")
    synthetic = np.empty_like(visible_pool.features)
    for i, (feats, scale) in enumerate(zip(visible_pool.features, visible_pool.scales)):
        mask = lib[int(pick.integers(0, len(lib)))]
        proto = nearest_prototype(bank, float(scale))
        synthetic[i] = copy_paste(feats, proto.center, mask)
    stage1 = FeaturePools(occluded=synthetic, visible=visible_pool.features)
    gen, disc, history = train_adversarial(
        stage1, gen, disc, configs[0], rng.split("stage1"), paired=True)

    stage2 = FeaturePools(occluded=_paste_pool(real_occluded_pool, bank, occ_config),
                          visible=visible_pool.features)
    gen, disc, tail = train_adversarial(
        stage2, gen, disc, configs[1], rng.split("stage2"),
        start_iteration=configs[0].iterations)
    history.extend(tail)
    return gen, disc, history


class ScoringHead:
    """Logistic probe scoring how pedestrian-like a feature map is.

    Inputs are normalized to unit root-mean-square before the dense layer,
    so the verdict depends on the cell pattern rather than on how large
    the object was.
    """

    def __init__(self, layer, trained=False):
        if layer.activation != "sigmoid" or layer.out_dim != 1:
            raise PreconditionError("scoring head needs a single sigmoid output")
        self.layer = layer
        self.trained = trained

    @classmethod
    def init(cls, in_dim, rng):
        return cls(DenseLayer.init(in_dim, 1, rng, "sigmoid"))

    @property
    def in_dim(self):
        return self.layer.in_dim

    @staticmethod
    def _normalize(flat):
        rms = np.sqrt(np.mean(flat ** 2, axis=0, keepdims=True))
        return np.divide(flat, rms, out=np.array(flat, dtype=np.float64),
                         where=rms > 0)

    def probability(self, features):
        """Pedestrian probability for one (c, x, y) map or a batch."""
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim == 3:
            flat = feats.reshape(-1)
            if flat.shape[0] != self.in_dim:
                raise ShapeMismatchError("head input", flat, (self.in_dim,))
            return float(self.layer.forward(self._normalize(flat[:, None]))[0, 0])
        flat = _flatten_batch(feats)
        return self.layer.forward(self._normalize(flat))[0]

    def params(self):
        return self.layer.params()

    def set_params(self, params):
        self.layer.set_params(params)


def train_scoring_head(positives, negatives, rng, iterations=500, learn_rate=0.5):
    """Fit the logistic head on visible-domain features with cross-entropy."""
    pos = np.asarray(positives, dtype=np.float64)
    neg = np.asarray(negatives, dtype=np.float64)
    if pos.ndim != 4 or neg.ndim != 4 or pos.shape[1:] != neg.shape[1:]:
        raise PreconditionError("head training pools must be (n, c, x, y), same dims")
    if pos.shape[0] == 0 or neg.shape[0] == 0:
        raise PreconditionError("head training pools must be non-empty")
    head = ScoringHead.init(int(np.prod(pos.shape[1:])), rng.split("head-init"))
    flat = head._normalize(np.concatenate(
        [_flatten_batch(pos), _flatten_batch(neg)], axis=1))
    labels = np.concatenate([np.ones(pos.shape[0]), np.zeros(neg.shape[0])])
    n = labels.size
    for _ in range(iterations):
        # Cross-entropy gradient taken at the pre-activation, (p - y) / n:
        # bounded even when a logit saturates, unlike routing 1/p upstream
        # through the sigmoid derivative, which silently zeroes out any
        # sample pushed past the probability clamp.
        p = sigmoid(head.layer.weights @ flat + head.layer.bias[:, None])[0]
        err = ((p - labels) / n)[None, :]
        dw = err @ flat.T
        db = err.sum(axis=1)
        head.layer.set_params(sgd_step(head.layer.params(), [dw, db],
                                       learn_rate, "descend"))
    head.trained = True
    return head


def rescore(proposal, completed, head, occluded):
    """Replace an occluded proposal's score with the head's verdict.

    Non-occluded proposals keep their original detector score untouched.
    """
    if not occluded:
        return proposal.score
    if not head.trained:
        raise PreconditionError("scoring head is untrained")
    return head.probability(np.asarray(completed, dtype=np.float64))


# ---------------------------------------------------------------------------
# Model container: generator + discriminator + scoring head + train configs.

def write_model(path, gen, disc, head, configs, grid):
    """Serialize the trained parts; `grid` is the (x, y) cell layout."""
    c = gen.channels
    gx, gy = (int(v) for v in grid)
    if gx < 1 or gy < 1:
        raise PreconditionError("grid dims must be positive")
    if disc.in_dim != c * gx * gy or head.in_dim != disc.in_dim:
        raise PreconditionError("model parts disagree on feature dims")
    chunks = [MODEL_MAGIC, struct.pack("<I", MODEL_VERSION),
              struct.pack("<IIII", c, gx, gy, disc.hidden.out_dim)]
    for arr in gen.params() + disc.params() + head.params():
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    chunks.append(struct.pack("<B", 1 if head.trained else 0))
    chunks.append(struct.pack("<I", len(configs)))
    for cfg in configs:
        cfg.validate()
        chunks.append(struct.pack("<IIIdB", cfg.iterations, cfg.disc_steps,
                                  cfg.batch_size, cfg.learn_rate,
                                  STAGES.index(cfg.stage)))
    data = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, count, what):
        if self.pos + count > len(self.data):
            raise FormatError(self.pos, f"truncated {what}")
        chunk = self.data[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def floats(self, shape, what):
        count = int(np.prod(shape)) * 8
        start = self.pos
        arr = np.frombuffer(self.take(count, what), dtype="<f8").reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise FormatError(start, f"non-finite value in {what}")
        return arr.copy()


def read_model(path):
    """Load (generator, discriminator, head, grid, configs) from a model file."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(4, "magic") != MODEL_MAGIC:
        raise FormatError(0, "bad magic, not a model file")
    version = struct.unpack("<I", r.take(4, "version"))[0]
    if version != MODEL_VERSION:
        raise FormatError(4, f"unsupported version {version}")
    head_pos = r.pos
    c, gx, gy, width = struct.unpack("<IIII", r.take(16, "dims"))
    if c < 1 or gx < 1 or gy < 1 or width < 1:
        raise FormatError(head_pos, "model dims must be positive")
    flat_dim = c * gx * gy

    gen = Generator(
        DenseLayer(r.floats((c, c), "generator mix weights"),
                   r.floats((c,), "generator mix bias"), "relu"),
        DenseLayer(r.floats((c, c), "generator out weights"),
                   r.floats((c,), "generator out bias"), "identity"))
    disc = Discriminator(
        DenseLayer(r.floats((width, flat_dim), "discriminator hidden weights"),
                   r.floats((width,), "discriminator hidden bias"), "relu"),
        DenseLayer(r.floats((1, width), "discriminator readout weights"),
                   r.floats((1,), "discriminator readout bias"), "sigmoid"))
    head = ScoringHead(
        DenseLayer(r.floats((1, flat_dim), "head weights"),
                   r.floats((1,), "head bias"), "sigmoid"))
    head.trained = bool(struct.unpack("<B", r.take(1, "head flag"))[0])

    count_pos = r.pos
    n_cfg = struct.unpack("<I", r.take(4, "config count"))[0]
    if n_cfg > 16:
        raise FormatError(count_pos, f"implausible config count {n_cfg}")
    configs = []
    for i in range(n_cfg):
        rec_pos = r.pos
        iters, steps, batch, rate, stage = struct.unpack(
            "<IIIdB", r.take(21, f"train config {i}"))
        if stage >= len(STAGES):
            raise FormatError(rec_pos, f"unknown stage code {stage}")
        cfg = TrainConfig(stage=STAGES[stage], iterations=iters,
                          disc_steps=steps, batch_size=batch, learn_rate=rate)
        try:
            cfg.validate()
        except PreconditionError as err:
            raise FormatError(rec_pos, f"invalid train config: {err}") from err
        configs.append(cfg)
    if r.pos != len(data):
        raise FormatError(r.pos, "trailing bytes after model payload")
    return gen, disc, head, (gx, gy), tuple(configs)
