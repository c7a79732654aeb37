"""Minibatch training loop: selection, encoder updates, regularization branches.

Each step, in order: forward the batch, select each sample's latent feature by
maximizing the batch-normalized joint score, update the encoder on the
selected pairs, optionally update on a labeled batch, then run exactly one
regularization branch (class-conditioned generation, feature matching, or
negative sampling), which trains the encoder toward total confusion on fakes
and, when a generator exists, trains the generator one step too.

Runs are deterministic given (config, seed): every random draw comes from a
named sub-stream of the master seed, shuffles are re-derived per epoch, and
checkpoints capture optimizer moments, queue contents and stream states so a
resumed run continues bit-identically.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from discenc import nn
from discenc.core import (
    BatchEncodings,
    RecentQueue,
    UniformCategorical,
    UniformSphere,
    confusion_loss,
    encoder_loss_categorical,
    encoder_loss_gaussian,
    select_latent_categorical,
    select_latent_gaussian_batch,
    supervised_loss,
)
from discenc.evaluate import (
    assign_labels_max_intersection,
    clustering_error,
    map_labels,
    posterior_clusters,
)
from discenc.regularize import Generator, generator_loss_class_conditioned, feature_matching_loss
from discenc.rng import RngHub, epoch_shuffle_rng, stream_rng

REGULARIZERS = ("none", "negative_sampling", "class_conditioned", "feature_matching")

METRIC_COLUMNS = ("epoch", "joint_loss", "supervised_loss", "confusion_loss",
                  "generator_loss", "clustering_error")


class ConfigError(ValueError):
    """A configuration field is missing, malformed, or inconsistent."""


class TrainingAbort(RuntimeError):
    """Training hit non-finite numbers; carries the last good checkpoint path."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    """Everything a run needs besides the dataset itself."""

    head: str = "categorical"               # categorical | gaussian
    classes: int = 10                       # K (categorical head)
    latent_dim: int = 16                    # m (gaussian head)
    lam: float = 0.5                        # encoding variance (gaussian head)
    sphere_radius: float = None             # default sqrt(latent_dim)
    encoder_hidden: list = field(default_factory=lambda: [256])
    activation: str = "leaky_relu"
    leaky_slope: float = 0.2
    dropout: float = 0.0
    batch_size: int = 100
    learning_rate: float = 0.0002
    epochs: int = 1
    seed: int = 0
    regularization: str = "none"
    semi_supervised_per_class: int = 0      # 0 disables the labeled term
    generator_hidden: list = field(default_factory=lambda: [256])
    noise_dim: int = 32
    generator_output: str = None            # sigmoid | tanh | None (from data normalization)
    generator_lr: float = None              # default: learning_rate
    queue_capacity: int = 1000
    gaussian_steps: int = 25
    gaussian_step_size: float = None        # default 0.1 * lam
    weight_joint: float = 1.0               # 0 skips the update entirely
    weight_supervised: float = 1.0
    weight_confusion: float = 1.0
    eval_every: int = 1                     # epochs between clustering evals; 0 = never
    early_stop: bool = False
    early_stop_rel: float = 1e-4
    early_stop_patience: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.head not in ("categorical", "gaussian"):
            raise ConfigError(f"head must be categorical or gaussian, got {self.head!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (the batch normalizer is vacuous at 1)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.regularization not in REGULARIZERS:
            raise ConfigError(f"regularization must be one of {REGULARIZERS}")
        if self.head == "categorical" and self.classes < 1:
            raise ConfigError("classes must be >= 1")
        if self.head == "gaussian":
            if self.latent_dim < 1:
                raise ConfigError("latent_dim must be >= 1")
            if self.lam <= 0:
                raise ConfigError("lam must be positive")
            if self.regularization != "none":
                raise ConfigError("adversarial regularization applies to categorical heads only")
            if self.queue_capacity < 1:
                raise ConfigError("queue_capacity must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.semi_supervised_per_class < 0:
            raise ConfigError("semi_supervised_per_class must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class TrainState:
    """Mutable run state; everything needed to continue a run bit-identically."""

    epoch: int
    hub: RngHub
    enc_adam: nn.AdamState
    gen_adam: nn.AdamState
    queue: RecentQueue
    history: list


class Trainer:
    """Owns the encoder, optional generator, and the training state for one run."""

    def __init__(self, config: TrainConfig, dataset, split=None, negative_sampler=None,
                 fake_transform=None):
        config.validate()
        self.config = config
        self.dataset = dataset
        self.split = split
        self.negative_sampler = negative_sampler
        self.fake_transform = fake_transform if fake_transform is not None else (lambda m: m)

        if config.semi_supervised_per_class > 0 and split is None:
            raise ConfigError("semi-supervised training needs a labeled split")
        if config.regularization == "negative_sampling" and negative_sampler is None:
            raise ConfigError("negative sampling needs a fitted NegativeSampler")

        out_dim = config.classes if config.head == "categorical" else config.latent_dim
        self.encoder = nn.feedforward(
            dataset.dim, list(config.encoder_hidden), out_dim,
            head="softmax" if config.head == "categorical" else "gaussian",
            activation=config.activation, slope=config.leaky_slope, dropout=config.dropout,
        )
        hub = RngHub(config.seed)
        nn.init_params(self.encoder, stream_rng(config.seed, "init"))

        self.generator = None
        gen_adam = None
        if config.regularization in ("class_conditioned", "feature_matching"):
            mode = config.regularization
            in_dim = config.noise_dim + (config.classes if mode == "class_conditioned" else 0)
            out_act = config.generator_output
            if out_act is None:
                out_act = {"unit": "sigmoid", "symmetric": "tanh"}.get(
                    getattr(dataset, "normalization", "none"))
            gnet = nn.feedforward(in_dim, list(config.generator_hidden), dataset.dim,
                                  head="gaussian", activation=config.activation,
                                  slope=config.leaky_slope, output_activation=out_act)
            nn.init_params(gnet, stream_rng(config.seed, "init", 1))
            self.generator = Generator(gnet, config.noise_dim, mode)
            gen_adam = nn.AdamState(gnet.parameters(),
                                    lr=config.generator_lr or config.learning_rate)

        self.prior = (UniformCategorical(config.classes) if config.head == "categorical"
                      else UniformSphere(config.latent_dim, config.sphere_radius))
        queue = RecentQueue(config.queue_capacity) if config.head == "gaussian" else None
        self.state = TrainState(
            epoch=0,
            hub=hub,
            enc_adam=nn.AdamState(self.encoder.parameters(), lr=config.learning_rate),
            gen_adam=gen_adam,
            queue=queue,
            history=[],
        )
        self._labeled_perm = None  # set per epoch

    # -- single step ------------------------------------------------------

    def train_step(self, ids, labeled_ids=None) -> dict:
        """One pass of the minibatch algorithm; returns this step's loss values."""
        cfg = self.config
        state = self.state
        x = self.dataset.rows(ids)
        metrics = {"joint_loss": None, "supervised_loss": None,
                   "confusion_loss": None, "generator_loss": None}

        need_selection = cfg.weight_joint != 0.0 or cfg.regularization == "class_conditioned"
        assignments = None
        if need_selection:
            out, penult = self.encoder.forward(x, training=True, rng=state.hub.get("dropout"))
            if cfg.head == "categorical":
                enc = BatchEncodings.from_logits(penult)
                assignments = select_latent_categorical(enc)
                if cfg.weight_joint != 0.0:
                    loss, grad = encoder_loss_categorical(enc, assignments)
                    self._update_encoder(grad * cfg.weight_joint)
                    metrics["joint_loss"] = self._finite(loss, "joint")
            else:
                state.queue.push_batch(out)
                targets = select_latent_gaussian_batch(
                    out, state.queue, self.prior, cfg.lam,
                    steps=cfg.gaussian_steps, step_size=cfg.gaussian_step_size)
                if cfg.weight_joint != 0.0:
                    loss, grad = encoder_loss_gaussian(out, targets, cfg.lam)
                    self._update_encoder(grad * cfg.weight_joint)
                    metrics["joint_loss"] = self._finite(loss, "joint")

        if labeled_ids is not None and cfg.weight_supervised != 0.0:
            xs = self.dataset.rows(labeled_ids)
            _, penult_s = self.encoder.forward(xs, training=True, rng=state.hub.get("dropout"))
            loss, grad = supervised_loss(BatchEncodings.from_logits(penult_s),
                                         self.dataset.labels[labeled_ids])
            self._update_encoder(grad * cfg.weight_supervised)
            metrics["supervised_loss"] = self._finite(loss, "supervised")

        if cfg.regularization == "negative_sampling":
            fake_counts = self.negative_sampler.sample_documents(len(ids), state.hub.get("sampler"))
            fakes = self.fake_transform(fake_counts)
            if hasattr(fakes, "toarray"):
                fakes = fakes.toarray()
            metrics["confusion_loss"] = self._confusion_update(fakes)
        elif cfg.regularization == "class_conditioned":
            fakes = self.generator.generate_class_conditioned(
                assignments, state.hub.get("noise"), training=True)
            metrics["confusion_loss"] = self._confusion_update(fakes)
            _, penult_f = self.encoder.forward(fakes, training=True,
                                               rng=state.hub.get("dropout"))
            gloss, grad = generator_loss_class_conditioned(
                BatchEncodings.from_logits(penult_f), assignments)
            self._update_generator(grad)
            metrics["generator_loss"] = self._finite(gloss, "generator")
        elif cfg.regularization == "feature_matching":
            fakes = self.generator.generate(len(ids), state.hub.get("noise"), training=True)
            metrics["confusion_loss"] = self._confusion_update(fakes)
            _, penult_real = self.encoder.forward(x, training=False)
            _, penult_f = self.encoder.forward(fakes, training=True,
                                               rng=state.hub.get("dropout"))
            gloss, grad = feature_matching_loss(penult_real, penult_f)
            self._update_generator(grad)
            metrics["generator_loss"] = self._finite(gloss, "generator")
        return metrics

    def _finite(self, loss, name):
        if not np.isfinite(loss):
            raise nn.NumericalError(f"non-finite {name} loss: {loss}")
        return float(loss)

    def _update_encoder(self, grad_head_input):
        grads, _ = self.encoder.backward(grad_head_input)
        nn.adam_step(self.encoder.parameters(), grads, self.state.enc_adam)

    def _update_generator(self, grad_head_input):
        # Encoder parameters stay frozen; only its input gradient flows on.
        _, grad_in = self.encoder.backward(grad_head_input)
        grads, _ = self.generator.network.backward(grad_in)
        nn.adam_step(self.generator.network.parameters(), grads, self.state.gen_adam)

    def _confusion_update(self, fakes):
        cfg = self.config
        if cfg.weight_confusion == 0.0:
            return None
        _, penult = self.encoder.forward(fakes, training=True, rng=self.state.hub.get("dropout"))
        loss, grad = confusion_loss(BatchEncodings.from_logits(penult),
                                    UniformCategorical(cfg.classes))
        self._update_encoder(grad * cfg.weight_confusion)
        return self._finite(loss, "confusion")

    # -- full run ---------------------------------------------------------

    def run(self, out_dir=None, checkpoint_every=0, quiet=True, log=print):
        """Train for the configured epochs; returns the metrics history.

        Writes ``metrics.csv`` plus periodic checkpoints under `out_dir` when
        given.  A non-finite loss aborts with a reference to the last good
        checkpoint.
        """
        cfg = self.config
        n = self.dataset.n
        steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
        labeled_pool = self.split.all_labeled if (
            self.split is not None and cfg.semi_supervised_per_class > 0) else None
        last_checkpoint = None
        flat_epochs = 0
        prev_monitor = None

        try:
            while self.state.epoch < cfg.epochs:
                epoch = self.state.epoch + 1
                g = epoch_shuffle_rng(cfg.seed, epoch)
                perm = g.permutation(n)
                labeled_perm = g.permutation(labeled_pool) if labeled_pool is not None else None
                sums, counts = {}, {}
                for s in range(steps_per_epoch):
                    ids = perm[s * cfg.batch_size:(s + 1) * cfg.batch_size]
                    lab_ids = None
                    if labeled_perm is not None:
                        lab_ids = labeled_perm.take(
                            range(s * cfg.batch_size, (s + 1) * cfg.batch_size), mode="wrap")
                    step_metrics = self.train_step(ids, lab_ids)
                    for key, val in step_metrics.items():
                        if val is not None:
                            sums[key] = sums.get(key, 0.0) + val
                            counts[key] = counts.get(key, 0) + 1
                row = {col: None for col in METRIC_COLUMNS}
                row["epoch"] = epoch
                for key in sums:
                    row[key] = sums[key] / counts[key]
                if (cfg.eval_every and cfg.head == "categorical"
                        and self.dataset.labels is not None and epoch % cfg.eval_every == 0):
                    row["clustering_error"] = self._clustering_error()
                self.state.epoch = epoch
                self.state.history.append(row)
                if not quiet:
                    log("  ".join(f"{k}={row[k]:.5f}" if isinstance(row[k], float)
                                  else f"{k}={row[k]}" for k in METRIC_COLUMNS
                                  if row[k] is not None))
                if out_dir and checkpoint_every and epoch % checkpoint_every == 0:
                    last_checkpoint = self.save_checkpoint(
                        os.path.join(out_dir, f"checkpoint_epoch{epoch:05d}"))
                monitor = row["joint_loss"] if row["joint_loss"] is not None \
                    else row["supervised_loss"]
                if cfg.early_stop and monitor is not None and prev_monitor is not None:
                    rel = abs(monitor - prev_monitor) / max(abs(prev_monitor), 1e-12)
                    flat_epochs = flat_epochs + 1 if rel < cfg.early_stop_rel else 0
                    if flat_epochs >= cfg.early_stop_patience:
                        break
                prev_monitor = monitor
        except nn.NumericalError as exc:
            if out_dir:
                self.write_metrics(os.path.join(out_dir, "metrics.csv"))
            raise TrainingAbort(
                f"{exc} (last good checkpoint: {last_checkpoint or 'none written'})",
                last_checkpoint=last_checkpoint,
            ) from exc

        if out_dir:
            self.save_checkpoint(os.path.join(out_dir, "checkpoint_final"))
            self.write_metrics(os.path.join(out_dir, "metrics.csv"))
        return self.state.history

    def _clustering_error(self) -> float:
        post, clusters = posterior_clusters(self.encoder, self.dataset.features
                                            if hasattr(self.dataset, "features")
                                            else self.dataset.matrix)
        mapping = assign_labels_max_intersection(clusters, self.dataset.labels,
                                                 self.config.classes)
        return clustering_error(map_labels(clusters, mapping), self.dataset.labels)

    # -- persistence ------------------------------------------------------

    def write_metrics(self, path) -> None:
        write_metrics_csv(self.state.history, path)

    def save_checkpoint(self, ckpt_dir) -> str:
        os.makedirs(ckpt_dir, exist_ok=True)
        nn.save_network(self.encoder, os.path.join(ckpt_dir, "encoder.disc"))
        if self.generator is not None:
            nn.save_network(self.generator.network, os.path.join(ckpt_dir, "generator.disc"))
        arrays = {f"enc_{k}": v for k, v in self.state.enc_adam.state_arrays().items()}
        if self.state.gen_adam is not None:
            arrays.update({f"gen_{k}": v for k, v in self.state.gen_adam.state_arrays().items()})
        if self.state.queue is not None and len(self.state.queue):
            arrays["queue"] = self.state.queue.snapshot()
        tmp = os.path.join(ckpt_dir, "state.npz.tmp")
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, os.path.join(ckpt_dir, "state.npz"))
        meta = {
            "version": 1,
            "config": self.config.to_dict(),
            "epoch": self.state.epoch,
            "enc_step": self.state.enc_adam.step,
            "gen_step": self.state.gen_adam.step if self.state.gen_adam else None,
            "rng": self.state.hub.state(),
            "history": self.state.history,
            "has_generator": self.generator is not None,
        }
        tmp = os.path.join(ckpt_dir, "state.json.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(meta, fh)
        os.replace(tmp, os.path.join(ckpt_dir, "state.json"))
        return ckpt_dir

    @classmethod
    def resume(cls, ckpt_dir, dataset, split=None, negative_sampler=None,
               fake_transform=None) -> "Trainer":
        """Rebuild a trainer continuing bit-identically from a checkpoint."""
        with open(os.path.join(ckpt_dir, "state.json"), encoding="utf-8") as fh:
            meta = json.load(fh)
        config = TrainConfig.from_dict(meta["config"])
        trainer = cls(config, dataset, split=split, negative_sampler=negative_sampler,
                      fake_transform=fake_transform)
        trainer.encoder = nn.load_network(os.path.join(ckpt_dir, "encoder.disc"))
        if meta["has_generator"]:
            gnet = nn.load_network(os.path.join(ckpt_dir, "generator.disc"))
            trainer.generator = Generator(gnet, config.noise_dim, config.regularization)
        arrays = np.load(os.path.join(ckpt_dir, "state.npz"))
        enc_adam = nn.AdamState(trainer.encoder.parameters(), lr=config.learning_rate)
        enc_adam.load_arrays(
            {k[4:]: arrays[k] for k in arrays.files if k.startswith("enc_")}, meta["enc_step"])
        gen_adam = None
        if meta["has_generator"]:
            gen_adam = nn.AdamState(trainer.generator.network.parameters(),
                                    lr=config.generator_lr or config.learning_rate)
            gen_adam.load_arrays(
                {k[4:]: arrays[k] for k in arrays.files if k.startswith("gen_")},
                meta["gen_step"])
        queue = None
        if config.head == "gaussian":
            queue = RecentQueue(config.queue_capacity)
            if "queue" in arrays.files:
                queue.push_batch(arrays["queue"])
        hub = RngHub(config.seed)
        hub.set_state(meta["rng"])
        trainer.state = TrainState(epoch=meta["epoch"], hub=hub, enc_adam=enc_adam,
                                   gen_adam=gen_adam, queue=queue, history=meta["history"])
        return trainer


def run(config: TrainConfig, dataset, split=None, **kwargs):
    """Convenience wrapper: build a Trainer and run it to completion."""
    trainer = Trainer(config, dataset, split=split,
                      negative_sampler=kwargs.pop("negative_sampler", None),
                      fake_transform=kwargs.pop("fake_transform", None))
    history = trainer.run(**kwargs)
    return trainer, history


def write_metrics_csv(history, path) -> None:
    """One row per epoch; absent values are empty fields; floats use repr."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in history:
            writer.writerow([
                "" if row.get(col) is None else
                (repr(row[col]) if isinstance(row[col], float) else row[col])
                for col in METRIC_COLUMNS
            ])
    os.replace(tmp, path)
