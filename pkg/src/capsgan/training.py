"""Training loops: the margin-loss capsule classifier, and the
gradient-penalty Wasserstein GAN in unconditional and class-conditional
forms.

Every random draw comes from a named SeedSequence stream keyed by the run
seed and the absolute step index, so a run resumed from a checkpoint
replays the exact trace of an uninterrupted one.  Model parameters are
replaced wholesale each step; critic steps request gradients only for
critic parameters and generator steps only for generator parameters.
"""

from __future__ import annotations

import os

import numpy as np

from . import capsules, data, models
from .config import config_to_text
from .checkpoint import load_checkpoint, save_checkpoint
from .optim import Adam
from .tensor import NonFiniteError, Tape, Tensor, grad, paused

# stream tags; one independent stream per purpose per step
_LATENT = 0x1A7E
_ALPHA = 0xA1FA
_LABELS = 0x1AB5
_PREVIEW = 0x9E1D
_INIT_G = 0x6E06
_INIT_D = 0xD15C
_INIT_C = 0xC1A5

METRICS_HEADER = "step,wasserstein,penalty,margin_real,margin_fake,gen_loss"


class DivergenceError(Exception):
    """Loss went non-finite three steps in a row."""


def _rng(seed, tag, *rest):
    return np.random.default_rng(np.random.SeedSequence([seed, tag, *rest]))


def _latent(cfg, n, tag_rest, dtype, dim=None):
    z = _rng(cfg.seed, _LATENT, *tag_rest).standard_normal((n, dim or cfg.latent_dim))
    return Tensor(z.astype(dtype))


def _uniform_onehot(cfg, n, classes, tag_rest, dtype):
    ids = _rng(cfg.seed, _LABELS, *tag_rest).integers(0, classes, size=n)
    return ids, Tensor(np.eye(classes, dtype=dtype)[ids])


def _margin_params(cfg):
    return capsules.MarginLossParams(cfg.m_plus, cfg.m_minus, cfg.lambda_down)


def _dtype(cfg):
    return np.float64 if cfg.f64 else np.float32


def _apply(opt, model, loss, tape):
    names = list(model.p)
    grads = grad(loss, [model.p[k] for k in names], tape=tape)
    model.p = opt.step(model.p, dict(zip(names, grads)))


def _load_train_data(cfg):
    if cfg.dataset == "celeba-dir":
        return data.load_celeba_dir(cfg.resolved_data_dir(), cfg.image_size)
    return data.load_named_dataset(cfg.dataset, cfg.resolved_data_dir(), "train")


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------


def build_classifier(cfg, class_count, dtype=np.float32):
    return models.CapsuleClassifier(
        _rng(cfg.seed, _INIT_C), classes=class_count,
        in_channels=cfg.image_channels, image_size=cfg.image_size,
        front_channels=cfg.front_channels, primary_channels=cfg.primary_channels,
        capsule_dim=cfg.capsule_dim, secondary_dim=cfg.secondary_dim,
        routing_iters=cfg.routing_iters, front_kernel=cfg.front_kernel,
        primary_kernel=cfg.primary_kernel, dtype=dtype,
    )


def evaluate_classifier(model, dataset, batch_size=64):
    """Top-1 accuracy of the capsule-length argmax over the whole set."""
    hits = 0
    with paused():
        for start in range(0, len(dataset), batch_size):
            x = Tensor(dataset.images[start : start + batch_size])
            pred = model.predict(x)
            hits += int((pred == dataset.labels[start : start + batch_size]).sum())
    return hits / len(dataset)


def train_classifier(cfg, dataset=None, test_set=None, model=None, log=None):
    """Margin-loss training; returns (model, summary).  Writes a per-epoch
    accuracy CSV and a checkpoint holding model + optimizer state."""
    if dataset is None:
        dataset = _load_train_data(cfg)
    if dataset.multi_label:
        raise ValueError("classifier training needs single-label data")
    if test_set is None:
        test_set = data.load_named_dataset(cfg.dataset, cfg.resolved_data_dir(), "test")
    if model is None:
        model = build_classifier(cfg, dataset.class_count, _dtype(cfg))
    opt = Adam(model.p, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    mp = _margin_params(cfg)

    os.makedirs(cfg.out_dir, exist_ok=True)
    csv_path = os.path.join(cfg.out_dir, "accuracy.csv")
    ckpt_path = os.path.join(cfg.out_dir, "classifier.cpsg")
    dtype = model.dtype
    eye = np.eye(dataset.class_count, dtype=dtype)
    step = 0
    accuracies = []
    with open(csv_path, "w", encoding="utf-8") as csv:
        csv.write("epoch,test_accuracy\n")
        for epoch in range(cfg.epochs):
            for bx, by in data.batches(dataset, cfg.batch_size, cfg.seed,
                                       cfg.fraction, epoch):
                with Tape() as tape:
                    lengths = model.lengths(Tensor(bx.astype(dtype, copy=False)))
                    loss = capsules.margin_loss(lengths, Tensor(eye[by]), mp)
                    _apply(opt, model, loss, tape)
                step += 1
                if log and step % 50 == 0:
                    log(f"epoch {epoch} step {step} margin {loss.item():.4f}")
            acc = evaluate_classifier(model, test_set)
            accuracies.append(acc)
            csv.write(f"{epoch},{acc:.6f}\n")
            csv.flush()
            arrays = model.parameter_arrays()
            arrays.update(opt.state_arrays())
            save_checkpoint(ckpt_path, arrays, config_to_text(cfg), step)
            if log:
                log(f"epoch {epoch} done: test accuracy {acc:.4f}")
    summary = {
        "epochs": cfg.epochs,
        "steps": step,
        "accuracy": accuracies,
        "final_accuracy": accuracies[-1] if accuracies else float("nan"),
        "checkpoint": ckpt_path,
        "accuracy_csv": csv_path,
    }
    return model, summary


def load_classifier(cfg, path, class_count):
    """Rebuild a classifier from a checkpoint written by train_classifier."""
    arrays, _, _ = load_checkpoint(path)
    model = build_classifier(cfg, class_count, _dtype(cfg))
    model.load_arrays(arrays)
    return model


# ---------------------------------------------------------------------------
# GAN
# ---------------------------------------------------------------------------


def build_gan(cfg, conditional, class_count, dtype=np.float32):
    gen = models.Generator(
        _rng(cfg.seed, _INIT_G), latent_dim=cfg.latent_dim,
        label_dim=class_count if conditional else 0,
        base_channels=cfg.generator_base, out_channels=cfg.image_channels,
        image_size=cfg.image_size, dtype=dtype,
    )
    kw = dict(
        in_channels=cfg.image_channels, image_size=cfg.image_size,
        front_channels=cfg.front_channels, primary_channels=cfg.primary_channels,
        front_kernel=cfg.front_kernel, primary_kernel=cfg.primary_kernel,
        dtype=dtype,
    )
    rng_d = _rng(cfg.seed, _INIT_D)
    if conditional:
        critic = models.SplitCritic(
            rng_d, classes=class_count, capsule_dim=cfg.capsule_dim,
            secondary_dim=cfg.secondary_dim, routing_iters=cfg.routing_iters, **kw
        )
    elif cfg.critic == "cnn":
        critic = models.CnnCritic(rng_d, hidden=cfg.cnn_hidden, **kw)
    else:
        critic = models.CapsuleCritic(
            rng_d, capsule_dim=cfg.capsule_dim, secondary_dim=cfg.secondary_dim,
            routing_iters=cfg.routing_iters, **kw
        )
    return gen, critic


def _gan_arrays(gen, critic, opt_g, opt_d):
    arrays = gen.state_arrays()
    arrays.update(critic.parameter_arrays())
    arrays.update({f"opt_g.{k}": v for k, v in opt_g.state_arrays().items()})
    arrays.update({f"opt_d.{k}": v for k, v in opt_d.state_arrays().items()})
    return arrays


def _load_gan_arrays(arrays, gen, critic, opt_g, opt_d):
    gen.load_state(arrays)
    critic.load_arrays(arrays)
    opt_g.load_arrays({k[len("opt_g."):]: v for k, v in arrays.items()
                       if k.startswith("opt_g.")})
    opt_d.load_arrays({k[len("opt_d."):]: v for k, v in arrays.items()
                       if k.startswith("opt_d.")})


def _preview_grid(cfg, gen, class_count, step, out_dir):
    from .evalmetrics import emit_grid  # deferred: keeps module deps one-way

    n = 64
    z = _latent(cfg, n, (_PREVIEW,), gen.dtype, dim=gen.latent_dim)
    labels = None
    if gen.label_dim:
        ids = np.arange(n) % class_count
        labels = Tensor(np.eye(class_count, dtype=gen.dtype)[ids])
    with paused():
        images = gen.forward(z, labels, train=False).data
    path = os.path.join(out_dir, "samples", f"step{step:06d}")
    return emit_grid(images, path, rows=8, cols=8)


def train_gan(cfg, conditional=False, dataset=None, gan=None, resume=None,
              log=None, preview=True):
    """Alternating n_critic critic updates and one generator update.

    Returns (generator, critic, summary); summary carries the per-step
    metric trace that also lands in metrics.csv.  `resume` restores model,
    optimizer, and step state from a checkpoint written by a previous run
    with the same config and continues at the next epoch boundary.
    """
    if dataset is None:
        dataset = _load_train_data(cfg)
    class_count = dataset.class_count
    if conditional and dataset.multi_label:
        raise ValueError("conditional training needs single-label data")
    gen, critic = gan if gan is not None else build_gan(
        cfg, conditional, class_count, _dtype(cfg))
    dtype = gen.dtype
    opt_g = Adam(gen.p, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    opt_d = Adam(critic.p, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    mp = _margin_params(cfg)

    steps_per_epoch = data.batches_per_epoch(
        len(dataset), cfg.batch_size, cfg.fraction) // cfg.n_critic
    if steps_per_epoch < 1:
        raise ValueError("not enough batches for one critic/generator cycle")

    gstep = 0
    start_epoch = 0
    if resume:
        arrays, _, gstep = load_checkpoint(resume)
        _load_gan_arrays(arrays, gen, critic, opt_g, opt_d)
        if gstep % steps_per_epoch != 0:
            raise ValueError("checkpoint step is not at an epoch boundary")
        start_epoch = gstep // steps_per_epoch

    os.makedirs(cfg.out_dir, exist_ok=True)
    if preview:
        os.makedirs(os.path.join(cfg.out_dir, "samples"), exist_ok=True)
    csv_path = os.path.join(cfg.out_dir, "metrics.csv")
    ckpt_path = os.path.join(cfg.out_dir, "gan.cpsg")
    mode = "a" if resume and os.path.exists(csv_path) else "w"
    eye = np.eye(class_count, dtype=dtype)

    trace = []
    bad_streak = 0
    with open(csv_path, mode, encoding="utf-8") as csv:
        if mode == "w":
            csv.write(METRICS_HEADER + "\n")
        for epoch in range(start_epoch, cfg.epochs):
            stream = data.batches(dataset, cfg.batch_size, cfg.seed,
                                  cfg.fraction, epoch)
            for _ in range(steps_per_epoch):
                parts = {}
                # critic phase
                for i in range(cfg.n_critic):
                    bx, by = next(stream)
                    try:
                        z = _latent(cfg, cfg.batch_size, (gstep, i), dtype)
                        if conditional:
                            _, fake_onehot = _uniform_onehot(
                                cfg, cfg.batch_size, class_count, (gstep, i), dtype)
                            with paused():
                                fake = gen.forward(z, fake_onehot, train=True)
                        else:
                            with paused():
                                fake = gen.forward(z, train=True)
                        real = Tensor(bx.astype(dtype, copy=False))
                        rng_a = _rng(cfg.seed, _ALPHA, gstep, i)
                        with Tape() as tape:
                            if conditional:
                                loss, parts = models.conditional_critic_loss(
                                    critic, real, Tensor(eye[by]), fake,
                                    fake_onehot, cfg.lambda_gp, mp, rng=rng_a)
                            else:
                                loss, parts = models.critic_loss_wgan_gp(
                                    critic.score, real, fake, cfg.lambda_gp,
                                    rng=rng_a)
                            _apply(opt_d, critic, loss, tape)
                        bad_streak = 0
                    except NonFiniteError:
                        bad_streak += 1
                        if bad_streak >= 3:
                            raise DivergenceError(
                                f"non-finite loss 3 consecutive steps near "
                                f"generator step {gstep}")
                # generator phase
                try:
                    z = _latent(cfg, cfg.batch_size, (gstep, cfg.n_critic), dtype)
                    with Tape() as tape:
                        if conditional:
                            _, onehot = _uniform_onehot(
                                cfg, cfg.batch_size, class_count,
                                (gstep, cfg.n_critic), dtype)
                            images = gen.forward(z, onehot, train=True)
                            loss, gparts = models.conditional_generator_loss(
                                critic, images, onehot, mp)
                        else:
                            images = gen.forward(z, train=True)
                            loss = models.generator_loss(critic.score, images)
                        _apply(opt_g, gen, loss, tape)
                    gen_loss = float(loss.item())
                    bad_streak = 0
                except NonFiniteError:
                    bad_streak += 1
                    if bad_streak >= 3:
                        raise DivergenceError(
                            f"non-finite loss 3 consecutive steps near "
                            f"generator step {gstep}")
                    gen_loss = float("nan")
                gstep += 1
                row = {
                    "step": gstep,
                    "wasserstein": parts.get("wasserstein", float("nan")),
                    "penalty": parts.get("penalty", float("nan")),
                    "margin_real": parts.get("margin_real"),
                    "margin_fake": parts.get("margin_fake"),
                    "gen_loss": gen_loss,
                }
                trace.append(row)
                csv.write("{step},{w:.6f},{p:.6f},{mr},{mf},{g:.6f}\n".format(
                    step=gstep, w=row["wasserstein"], p=row["penalty"],
                    mr="" if row["margin_real"] is None else f"{row['margin_real']:.6f}",
                    mf="" if row["margin_fake"] is None else f"{row['margin_fake']:.6f}",
                    g=gen_loss))
                if log and gstep % 10 == 0:
                    log(f"step {gstep} wasserstein {row['wasserstein']:.4f} "
                        f"penalty {row['penalty']:.4f} gen {gen_loss:.4f}")
                if preview and gstep % cfg.eval_every == 0:
                    _preview_grid(cfg, gen, class_count, gstep, cfg.out_dir)
            save_checkpoint(ckpt_path, _gan_arrays(gen, critic, opt_g, opt_d),
                            config_to_text(cfg), gstep)
        csv.flush()
    summary = {
        "steps": gstep,
        "epochs": cfg.epochs,
        "steps_per_epoch": steps_per_epoch,
        "checkpoint": ckpt_path,
        "metrics_csv": csv_path,
        "trace": trace,
    }
    return gen, critic, summary


def load_generator(cfg, path, conditional, class_count):
    """Rebuild just the generator (with its normalization state) from a GAN
    checkpoint."""
    arrays, _, _ = load_checkpoint(path)
    gen, _ = build_gan(cfg, conditional, class_count, _dtype(cfg))
    gen.load_state(arrays)
    return gen


def generate(cfg, gen, n, class_ids=None, tag=0):
    """n images from the trained generator, optionally class-conditional;
    returns (images, class_ids) as numpy arrays."""
    z = _latent(cfg, n, (_PREVIEW, tag), gen.dtype, dim=gen.latent_dim)
    labels = None
    if gen.label_dim:
        if class_ids is None:
            class_ids = _rng(cfg.seed, _LABELS, _PREVIEW, tag).integers(
                0, gen.label_dim, size=n)
        labels = Tensor(np.eye(gen.label_dim, dtype=gen.dtype)[np.asarray(class_ids)])
    with paused():
        images = gen.forward(z, labels, train=False).data
    return images, (None if class_ids is None else np.asarray(class_ids))
