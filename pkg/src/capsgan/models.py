"""The networks and losses: transposed-convolution generator, capsule
critic, split-auxiliary capsule critic (score head + class head over shared
primary capsules), a parameter-matched CNN critic, and the Wasserstein
gradient-penalty / margin objectives that train them.

Critics never contain batch normalization: the penalty term differentiates
per-sample input gradients, and batch coupling would corrupt them.  The
generator uses batchnorm freely.
"""

from __future__ import annotations

import numpy as np

from . import capsules
from . import layers
from . import tensor as T
from .tensor import NORM_EPS, ShapeError, Tensor, grad


def _gauss(rng, shape, std, dtype, mean=0.0):
    return Tensor(rng.normal(mean, std, size=shape).astype(dtype))


def _const(value, shape, dtype):
    return Tensor(np.full(shape, value, dtype=dtype))


def relu(x):
    return T.maximum_with_constant(x, 0.0)


class _Model:
    """Named-parameter container.  Parameters are leaf tensors replaced
    wholesale on update; arrays are never mutated in place."""

    def __init__(self):
        self.p = {}

    def parameter_count(self):
        return sum(t.size for t in self.p.values())

    def parameter_arrays(self):
        return {k: np.array(v.data, copy=True) for k, v in self.p.items()}

    def load_arrays(self, arrays, prefix=""):
        for k in self.p:
            src = np.asarray(arrays[prefix + k])
            if src.shape != self.p[k].shape:
                raise ShapeError(
                    f"parameter {k}: stored shape {src.shape} != {self.p[k].shape}"
                )
            self.p[k] = Tensor(src.astype(self.p[k].data.dtype))


class Generator(_Model):
    """Dense projection from the latent (plus optional one-hot condition)
    to a low-resolution feature map, then two stride-2 transposed
    convolutions up to the target resolution, tanh output in [-1, 1]."""

    def __init__(self, rng, latent_dim=64, label_dim=0, base_channels=128,
                 out_channels=1, image_size=28, dtype=np.float32):
        super().__init__()
        if image_size % 4 != 0:
            raise ShapeError("image_size must be divisible by 4")
        if base_channels < 2:
            raise ShapeError("base_channels must be >= 2")
        self.latent_dim = latent_dim
        self.label_dim = label_dim
        self.image_size = image_size
        self.out_channels = out_channels
        self.base = base_channels
        self.start = image_size // 4
        self.dtype = np.dtype(dtype).type
        half = base_channels // 2
        self.p = {
            "g.dense.w": _gauss(rng, (latent_dim + label_dim, base_channels * self.start ** 2), 0.02, dtype),
            "g.dense.b": _const(0.0, (base_channels * self.start ** 2,), dtype),
            "g.bn0.scale": _gauss(rng, (base_channels,), 0.02, dtype, mean=1.0),
            "g.bn0.shift": _const(0.0, (base_channels,), dtype),
            "g.convt1.k": _gauss(rng, (base_channels, half, 4, 4), 0.02, dtype),
            "g.convt1.b": _const(0.0, (half,), dtype),
            "g.bn1.scale": _gauss(rng, (half,), 0.02, dtype, mean=1.0),
            "g.bn1.shift": _const(0.0, (half,), dtype),
            "g.convt2.k": _gauss(rng, (half, out_channels, 4, 4), 0.02, dtype),
            "g.convt2.b": _const(0.0, (out_channels,), dtype),
        }
        self.bn0 = layers.BatchNormState(base_channels, dtype=dtype)
        self.bn1 = layers.BatchNormState(half, dtype=dtype)

    def state_arrays(self):
        out = self.parameter_arrays()
        for name, st in (("g.bn0", self.bn0), ("g.bn1", self.bn1)):
            for k, v in st.state_arrays().items():
                out[f"{name}.running_{k}"] = np.array(v, copy=True)
        return out

    def load_state(self, arrays):
        self.load_arrays(arrays)
        for name, st in (("g.bn0", self.bn0), ("g.bn1", self.bn1)):
            st.load_arrays(
                {k: arrays[f"{name}.running_{k}"] for k in ("mean", "var")}
            )

    def forward(self, z, labels=None, train=True):
        if self.label_dim:
            if labels is None:
                raise ShapeError("conditional generator needs labels")
            if not isinstance(labels, Tensor):
                labels = Tensor(np.asarray(labels, dtype=self.dtype))
            z = T.concatenate([z, labels], axis=1)
        elif labels is not None:
            raise ShapeError("unconditional generator got labels")
        n = z.shape[0]
        h = layers.dense(z, self.p["g.dense.w"], self.p["g.dense.b"])
        h = T.reshape(h, (n, self.base, self.start, self.start))
        h = layers.batchnorm(h, self.p["g.bn0.scale"], self.p["g.bn0.shift"],
                             self.bn0, train)
        h = relu(h)
        h = layers.conv2d_transpose(h, self.p["g.convt1.k"], self.p["g.convt1.b"],
                                    stride=2, padding=1)
        h = layers.batchnorm(h, self.p["g.bn1.scale"], self.p["g.bn1.shift"],
                             self.bn1, train)
        h = relu(h)
        h = layers.conv2d_transpose(h, self.p["g.convt2.k"], self.p["g.convt2.b"],
                                    stride=2, padding=1)
        return T.tanh(h)


def _front_spatial(image_size, front_kernel, primary_kernel):
    s1 = layers.conv_output_size(image_size, front_kernel, 1, 0)
    s2 = layers.conv_output_size(s1, primary_kernel, 2, 0)
    return s1, s2


class _CapsuleFront(_Model):
    """Shared trunk of every capsule network here: one stride-1 convolution
    with leaky ReLU, then the primary-capsule convolution."""

    def __init__(self, rng, prefix, in_channels, image_size, front_channels,
                 primary_channels, capsule_dim, front_kernel, primary_kernel,
                 dtype):
        super().__init__()
        if primary_channels % capsule_dim != 0:
            raise ShapeError("primary channels must be divisible by capsule_dim")
        _, s2 = _front_spatial(image_size, front_kernel, primary_kernel)
        self.prefix = prefix
        self.in_channels = in_channels
        self.image_size = image_size
        self.capsule_dim = capsule_dim
        self.num_primary = (primary_channels // capsule_dim) * s2 * s2
        self.dtype = np.dtype(dtype).type
        self.p = {
            f"{prefix}.conv1.k": _gauss(rng, (front_channels, in_channels, front_kernel, front_kernel), 0.02, dtype),
            f"{prefix}.conv1.b": _const(0.0, (front_channels,), dtype),
            f"{prefix}.conv2.k": _gauss(rng, (primary_channels, front_channels, primary_kernel, primary_kernel), 0.02, dtype),
            f"{prefix}.conv2.b": _const(0.0, (primary_channels,), dtype),
        }

    def primary(self, x):
        if x.shape[1] != self.in_channels or x.shape[2] != self.image_size:
            raise ShapeError(
                f"expected (n, {self.in_channels}, {self.image_size}, "
                f"{self.image_size}) input, got {x.shape}"
            )
        h = layers.leaky_relu(
            layers.conv2d(x, self.p[f"{self.prefix}.conv1.k"],
                          self.p[f"{self.prefix}.conv1.b"], stride=1), 0.2
        )
        return capsules.primary_capsules(
            h, self.p[f"{self.prefix}.conv2.k"], self.p[f"{self.prefix}.conv2.b"],
            self.capsule_dim, stride=2
        )


class CapsuleCritic(_CapsuleFront):
    """Front capsules routed to a single unsquashed capsule; the score of an
    image is that capsule's stabilized norm, hence always >= 0."""

    def __init__(self, rng, in_channels=1, image_size=28, front_channels=256,
                 primary_channels=256, capsule_dim=8, secondary_dim=16,
                 routing_iters=3, front_kernel=9, primary_kernel=9,
                 dtype=np.float32):
        super().__init__(rng, "d", in_channels, image_size, front_channels,
                         primary_channels, capsule_dim, front_kernel,
                         primary_kernel, dtype)
        self.routing_iters = routing_iters
        self.p["d.route.w"] = _gauss(
            rng, (self.num_primary, 1, secondary_dim, capsule_dim), 0.02, dtype
        )

    def score(self, x):
        u = self.primary(x)
        s = capsules.dynamic_routing(
            u, self.p["d.route.w"], self.routing_iters, apply_final_squash=False
        )
        return T.reshape(capsules.capsule_norm(s, axis=-1), (x.shape[0],))


class SplitCritic(_CapsuleFront):
    """Shared primary capsules feeding two routed heads: a one-capsule
    critic (unsquashed, scored by norm) and a per-class squashed
    classifier.  Both heads of one input must be fed from a single
    primary-capsule evaluation."""

    def __init__(self, rng, classes, in_channels=1, image_size=28,
                 front_channels=256, primary_channels=256, capsule_dim=8,
                 secondary_dim=16, routing_iters=3, front_kernel=9,
                 primary_kernel=9, dtype=np.float32):
        super().__init__(rng, "d", in_channels, image_size, front_channels,
                         primary_channels, capsule_dim, front_kernel,
                         primary_kernel, dtype)
        self.classes = classes
        self.routing_iters = routing_iters
        self.p["d.critic.w"] = _gauss(
            rng, (self.num_primary, 1, secondary_dim, capsule_dim), 0.02, dtype
        )
        self.p["d.class.w"] = _gauss(
            rng, (self.num_primary, classes, secondary_dim, capsule_dim), 0.02, dtype
        )

    def shared(self, x):
        return self.primary(x)

    def score_from(self, u):
        s = capsules.dynamic_routing(
            u, self.p["d.critic.w"], self.routing_iters, apply_final_squash=False
        )
        return T.reshape(capsules.capsule_norm(s, axis=-1), (u.shape[0],))

    def class_capsules_from(self, u):
        return capsules.dynamic_routing(
            u, self.p["d.class.w"], self.routing_iters, apply_final_squash=True
        )

    def lengths_from(self, u):
        return capsules.capsule_norm(self.class_capsules_from(u), axis=-1)

    def score(self, x):
        return self.score_from(self.shared(x))

    def classify(self, x):
        return self.lengths_from(self.shared(x))


class CapsuleClassifier(_CapsuleFront):
    """Standalone margin-loss capsule classifier; also the feature extractor
    behind every score/distance metric (its per-class capsule vectors)."""

    def __init__(self, rng, classes=10, in_channels=1, image_size=28,
                 front_channels=256, primary_channels=256, capsule_dim=8,
                 secondary_dim=16, routing_iters=3, front_kernel=9,
                 primary_kernel=9, dtype=np.float32):
        super().__init__(rng, "c", in_channels, image_size, front_channels,
                         primary_channels, capsule_dim, front_kernel,
                         primary_kernel, dtype)
        self.classes = classes
        self.secondary_dim = secondary_dim
        self.routing_iters = routing_iters
        self.p["c.class.w"] = _gauss(
            rng, (self.num_primary, classes, secondary_dim, capsule_dim), 0.02, dtype
        )

    def class_capsules(self, x):
        u = self.primary(x)
        return capsules.dynamic_routing(
            u, self.p["c.class.w"], self.routing_iters, apply_final_squash=True
        )

    def lengths(self, x):
        return capsules.capsule_norm(self.class_capsules(x), axis=-1)

    def predict(self, x):
        return np.argmax(self.lengths(x).data, axis=1)


class CnnCritic(_Model):
    """Plain convolutional critic with an affine score head, sized so its
    trainable parameter count matches the capsule critic within 10% (the
    small dense hidden layer absorbs the routing-weight budget)."""

    def __init__(self, rng, in_channels=1, image_size=28, front_channels=256,
                 primary_channels=256, hidden=16, front_kernel=9,
                 primary_kernel=9, dtype=np.float32):
        super().__init__()
        _, s2 = _front_spatial(image_size, front_kernel, primary_kernel)
        self.in_channels = in_channels
        self.image_size = image_size
        flat = primary_channels * s2 * s2
        self.p = {
            "d.conv1.k": _gauss(rng, (front_channels, in_channels, front_kernel, front_kernel), 0.02, dtype),
            "d.conv1.b": _const(0.0, (front_channels,), dtype),
            "d.conv2.k": _gauss(rng, (primary_channels, front_channels, primary_kernel, primary_kernel), 0.02, dtype),
            "d.conv2.b": _const(0.0, (primary_channels,), dtype),
            "d.fc1.w": _gauss(rng, (flat, hidden), 0.02, dtype),
            "d.fc1.b": _const(0.0, (hidden,), dtype),
            "d.fc2.w": _gauss(rng, (hidden, 1), 0.02, dtype),
            "d.fc2.b": _const(0.0, (1,), dtype),
        }

    def score(self, x):
        if x.shape[1] != self.in_channels or x.shape[2] != self.image_size:
            raise ShapeError(f"unexpected input shape {x.shape}")
        n = x.shape[0]
        h = layers.leaky_relu(layers.conv2d(x, self.p["d.conv1.k"], self.p["d.conv1.b"], stride=1), 0.2)
        h = layers.leaky_relu(layers.conv2d(h, self.p["d.conv2.k"], self.p["d.conv2.b"], stride=2), 0.2)
        h = T.reshape(h, (n, h.size // n))
        h = layers.leaky_relu(layers.dense(h, self.p["d.fc1.w"], self.p["d.fc1.b"]), 0.2)
        return T.reshape(layers.dense(h, self.p["d.fc2.w"], self.p["d.fc2.b"]), (n,))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def gradient_penalty(score_fn, real, fake, alpha):
    """mean((|grad_xhat score(xhat)|_2 - 1)^2) along per-sample random
    interpolates xhat = alpha*real + (1-alpha)*fake."""
    n = real.shape[0]
    a = alpha if isinstance(alpha, Tensor) else Tensor(
        np.asarray(alpha, dtype=real.data.dtype).reshape((n,) + (1,) * (real.ndim - 1))
    )
    one = Tensor(np.array(1.0, dtype=real.data.dtype))
    xhat = T.add(T.mul(a, real), T.mul(T.sub(one, a), fake))
    scores = score_fn(xhat)
    (gx,) = grad(T.reduce_sum(scores), [xhat], create_graph=True)
    sq = T.reduce_sum(T.mul(gx, gx), axis=tuple(range(1, gx.ndim)))
    gnorm = T.sqrt(T.add(sq, Tensor(np.array(NORM_EPS, dtype=gx.data.dtype))))
    shifted = T.sub(gnorm, one)
    return T.reduce_mean(T.mul(shifted, shifted))


def _uniform_alpha(rng, n):
    return rng.uniform(0.0, 1.0, size=n)


def critic_loss_wgan_gp(score_fn, real, fake, lambda_gp=10.0, rng=None, alpha=None):
    """mean D(fake) - mean D(real) + lambda * penalty.  Returns the loss
    tensor and a part dict for logging; 'wasserstein' is the estimate
    mean D(real) - mean D(fake)."""
    if real.shape != fake.shape:
        raise ShapeError(f"real {real.shape} vs fake {fake.shape}")
    if alpha is None:
        if rng is None:
            raise ValueError("need rng or explicit alpha")
        alpha = _uniform_alpha(rng, real.shape[0])
    s_real = T.reduce_mean(score_fn(real))
    s_fake = T.reduce_mean(score_fn(fake))
    core = T.sub(s_fake, s_real)
    pen = gradient_penalty(score_fn, real, fake, alpha)
    lam = Tensor(np.array(lambda_gp, dtype=real.data.dtype))
    loss = T.add(core, T.mul(lam, pen))
    parts = {
        "wasserstein": float(s_real.item() - s_fake.item()),
        "penalty": float(pen.item()),
    }
    return loss, parts


def generator_loss(score_fn, images):
    """-mean D(G(z)): the generator climbs the critic's score."""
    neg = Tensor(np.array(-1.0, dtype=images.data.dtype))
    return T.mul(T.reduce_mean(score_fn(images)), neg)


def conditional_critic_loss(split, real, real_onehot, fake, fake_onehot,
                            lambda_gp=10.0, margin_params=None, rng=None,
                            alpha=None):
    """Wasserstein gradient-penalty loss plus margin terms: the class head
    must recognize real images as their true class and generated images as
    their intended class.  One shared forward per input feeds both heads."""
    if alpha is None:
        if rng is None:
            raise ValueError("need rng or explicit alpha")
        alpha = _uniform_alpha(rng, real.shape[0])
    u_real = split.shared(real)
    u_fake = split.shared(fake)
    s_real = T.reduce_mean(split.score_from(u_real))
    s_fake = T.reduce_mean(split.score_from(u_fake))
    pen = gradient_penalty(lambda x: split.score(x), real, fake, alpha)
    m_real = capsules.margin_loss(split.lengths_from(u_real), real_onehot, margin_params)
    m_fake = capsules.margin_loss(split.lengths_from(u_fake), fake_onehot, margin_params)
    lam = Tensor(np.array(lambda_gp, dtype=real.data.dtype))
    loss = T.add(T.add(T.sub(s_fake, s_real), T.mul(lam, pen)), T.add(m_real, m_fake))
    parts = {
        "wasserstein": float(s_real.item() - s_fake.item()),
        "penalty": float(pen.item()),
        "margin_real": float(m_real.item()),
        "margin_fake": float(m_fake.item()),
    }
    return loss, parts


def conditional_generator_loss(split, images, intended_onehot, margin_params=None):
    """-mean D(G(z)) plus the margin term asking the class head to put the
    generated image in its intended class."""
    u = split.shared(images)
    score = T.reduce_mean(split.score_from(u))
    m_fake = capsules.margin_loss(split.lengths_from(u), intended_onehot, margin_params)
    neg = Tensor(np.array(-1.0, dtype=images.data.dtype))
    loss = T.add(T.mul(score, neg), m_fake)
    parts = {"margin_fake": float(m_fake.item()), "score": float(score.item())}
    return loss, parts
