"""Joint optimisation loop, evaluation and the generation ablation."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import losses
from .config import ModelConfig, TrainConfig, from_dict, to_dict
from .data import Checkpoint, Dataset, batch_iterator, load_checkpoint, save_checkpoint
from .errors import ConfigError, TrainingError
from .metrics import clustering_accuracy, cluster_separation_report, f_measure, nmi
from .model import MoESimVAE, cluster_means, gate
from .similarity import batch_similarity

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.ckpt"
LOG_NAME = "train_log.jsonl"
DIAGNOSTIC_NAME = "failure.json"


@dataclass
class TrainLog:
    """Ordered step and eval records, optionally mirrored to a JSON-lines file.

    Every record carries a wall-clock ``time``; :meth:`deterministic` drops it
    so that two runs can be compared.
    """
    records: list[dict] = field(default_factory=list)
    path: Optional[Path] = None

    def append(self, record: dict) -> None:
        record = {**record, "time": time.time()}
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    def steps(self) -> list[dict]:
        return [r for r in self.records if r["kind"] == "step"]

    def evals(self) -> list[dict]:
        return [r for r in self.records if r["kind"] == "eval"]

    def deterministic(self) -> list[dict]:
        return [{k: v for k, v in r.items() if k != "time"} for r in self.records]

    @classmethod
    def read(cls, path) -> "TrainLog":
        with open(path) as f:
            return cls([json.loads(line) for line in f if line.strip()])


def model_config_for(config: TrainConfig, dataset: Dataset) -> ModelConfig:
    """Fill data-dependent model fields (input width, image shape)."""
    mc = config.model
    if mc.input_dim is None:
        mc.input_dim = dataset.n_features
    elif mc.input_dim != dataset.n_features:
        raise ConfigError(f"model.input_dim is {mc.input_dim} but the dataset has {dataset.n_features} features")
    if mc.image_shape is None and dataset.image_shape is not None:
        mc.image_shape = tuple(dataset.image_shape)
    return mc


def evaluate(model: MoESimVAE, dataset: Dataset, mmd: bool = False, seed: int = 0) -> dict:
    """Inference-mode metrics on the full dataset.

    Supervised metrics are None (not 0) when the dataset has no labels.
    """
    z, P = model.predict(dataset.features)
    assign = gate(P)
    out = {
        "n": len(dataset),
        "cluster_sizes": np.bincount(assign, minlength=model.num_experts).tolist(),
        "mean_max_prob": float(P.max(axis=1).mean()) if len(P) else None,
        "nmi": None,
        "acc": None,
        "f_measure": None,
    }
    if dataset.labels is not None:
        out["nmi"] = nmi(dataset.labels, assign)
        out["acc"] = clustering_accuracy(dataset.labels, assign)
        out["f_measure"] = f_measure(dataset.labels, assign)
    if mmd:
        out["mmd"] = cluster_separation_report(z, assign, seed=seed).as_dict()
    return out


def generation_ablation(model: MoESimVAE, n_per_cluster: int, seed: int = 0) -> dict:
    """Generate ``n_per_cluster`` samples per component and re-classify them.

    Samples are never rejected, so the decoder runs exactly K * n times.
    """
    rng = np.random.default_rng(seed)
    before = model.decoder_calls
    per_cluster = []
    for k in range(model.num_experts):
        x = model.generate(k, n_per_cluster, seed=rng)
        if n_per_cluster == 0:
            per_cluster.append(None)
            continue
        _, P = model.predict(x)
        per_cluster.append(float(np.mean(gate(P) == k)))
    valid = [a for a in per_cluster if a is not None]
    return {
        "n_per_cluster": n_per_cluster,
        "per_cluster": per_cluster,
        "mean_accuracy": float(np.mean(valid)) if valid else None,
        "decoder_calls": model.decoder_calls - before,
    }


def refresh_cluster_means(model: MoESimVAE, dataset: Dataset) -> None:
    """Recompute every mean from the full dataset (clusters left empty keep theirs)."""
    z, P = model.predict(dataset.features)
    model.cluster_means = cluster_means(P, z, previous=model.cluster_means).astype(model.dtype)


class Trainer:
    """Holds the mutable training state so that it can be checkpointed."""

    def __init__(self, dataset: Dataset, config: TrainConfig, embedding: Optional[np.ndarray] = None,
                 out_dir=None):
        config.model = model_config_for(config, dataset)
        config.validate()
        if config.batch_size > len(dataset):
            raise ConfigError(f"batch_size {config.batch_size} exceeds dataset size {len(dataset)}")
        self.dataset = dataset
        self.config = config
        self.embedding = embedding
        self.model = MoESimVAE(config.model, seed=config.seed)
        self.optimizer = ad.Adam(self.model.params, lr=config.learning_rate)
        self.dropout_rng = np.random.default_rng([config.seed, 1])
        self.step = 0
        self.epoch = 0
        self.batch_in_epoch = 0
        self.epoch_loss = 0.0
        self.epoch_batches = 0
        self.best_loss = float("inf")
        self.bad_epochs = 0
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.log = TrainLog()
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.log.path = self.out_dir / LOG_NAME

    # -- persistence ------------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        tensors = dict(self.model.state_arrays())
        tensors.update(self.optimizer.state_tensors())
        tensors["empty_batches"] = self.model.empty_batches.astype(np.float32)
        extra = {
            "batch_in_epoch": self.batch_in_epoch,
            "epoch_loss": self.epoch_loss,
            "epoch_batches": self.epoch_batches,
            "best_loss": self.best_loss if np.isfinite(self.best_loss) else None,
            "bad_epochs": self.bad_epochs,
            "scale_min": self.dataset.scale_min,
            "scale_max": self.dataset.scale_max,
            "feature_names": self.dataset.feature_names,
            "label_names": self.dataset.label_names,
        }
        return Checkpoint(config=to_dict(self.config), tensors=tensors, step=self.step, epoch=self.epoch,
                          optimizer_t=self.optimizer.t, rng_state=self.dropout_rng.bit_generator.state,
                          extra=extra)

    def restore(self, ckpt: Checkpoint) -> None:
        saved = from_dict(ModelConfig, ckpt.config["model"], prefix="model.")
        if to_dict(saved) != to_dict(self.config.model):
            raise ConfigError("checkpoint model configuration differs from the current one")
        self.model.load_state_arrays(ckpt.tensors)
        self.model.empty_batches = ckpt.tensors["empty_batches"].astype(np.int64)
        self.optimizer.load_state_tensors(ckpt.tensors, ckpt.optimizer_t)
        self.dropout_rng.bit_generator.state = ckpt.rng_state
        self.step, self.epoch = ckpt.step, ckpt.epoch
        extra = ckpt.extra
        self.batch_in_epoch = extra["batch_in_epoch"]
        self.epoch_loss = extra["epoch_loss"]
        self.epoch_batches = extra["epoch_batches"]
        self.best_loss = float("inf") if extra["best_loss"] is None else extra["best_loss"]
        self.bad_epochs = extra["bad_epochs"]

    def save(self, name: str = CHECKPOINT_NAME) -> Optional[Path]:
        if self.out_dir is None:
            return None
        path = self.out_dir / name
        save_checkpoint(path, self.checkpoint())
        return path

    # -- optimisation -------------------------------------------------------------

    def train_step(self, idx: np.ndarray, xb: np.ndarray) -> losses.LossBreakdown:
        cfg = self.config
        model = self.model
        warmup = self.epoch < cfg.warmup_epochs
        tape = ad.Tape()
        with tape:
            out = model.forward(xb, training=True, rng=self.dropout_rng)
            rec = losses.reconstruction_bce(xb, out.x_reconst)
            if warmup:
                zero = ad.Tensor(0.0, dtype=model.dtype)
                total, breakdown = losses.total_loss(rec, zero, zero, zero, cfg.model.pi1, cfg.model.pi2)
            else:
                S = batch_similarity(idx, self.dataset.features, cfg.similarity, self.embedding,
                                     self.dataset.labels)
                kl = losses.kl_mixture(out.z, out.P, out.assignments, soft=cfg.model.soft_kl_variance)
                sim = losses.similarity_bce(S, out.P, include_diagonal=cfg.model.similarity_diagonal)
                dep = losses.depict_loss(losses.depict_targets(out.P), out.P_noisy)
                total, breakdown = losses.total_loss(rec, kl, sim, dep, cfg.model.pi1, cfg.model.pi2)
        for p in model.params.values():
            p.grad = None
        tape.backward(total)
        self.optimizer.step(allow_missing=True)
        for name, p in model.params.items():
            if not np.isfinite(p.data).all():
                raise TrainingError(f"parameter {name!r} became non-finite", component=name)
        model.update_cluster_means(out.P, out.z)
        return breakdown

    def _fail(self, exc: TrainingError) -> None:
        diag = {"step": self.step, "epoch": self.epoch, "component": exc.component, "message": str(exc)}
        log.error("training aborted at step %d: %s", self.step, exc)
        if self.out_dir is not None:
            (self.out_dir / DIAGNOSTIC_NAME).write_text(json.dumps(diag, indent=2) + "\n")

    def run(self, stop_after: Optional[int] = None) -> bool:
        """Train to completion; returns False when stopped early by ``stop_after``.

        ``stop_after`` ends the run after that many global steps and writes a
        checkpoint from which :meth:`restore` continues identically.
        """
        cfg = self.config
        while self.epoch < cfg.epochs:
            batches = batch_iterator(self.dataset, cfg.batch_size, cfg.seed, epoch=self.epoch)
            for b, (idx, xb) in enumerate(batches):
                if b < self.batch_in_epoch:
                    continue
                try:
                    br = self.train_step(idx, xb)
                except TrainingError as exc:
                    self._fail(exc)
                    raise
                self.step += 1
                self.batch_in_epoch = b + 1
                self.epoch_loss += br.total
                self.epoch_batches += 1
                self.log.append({"kind": "step", "step": self.step, "epoch": self.epoch, **br.as_dict()})
                if stop_after is not None and self.step >= stop_after:
                    self.save()
                    return False
            stop = self._end_epoch()
            if stop:
                break
        refresh_cluster_means(self.model, self.dataset)
        self.save()
        return True

    def _end_epoch(self) -> bool:
        cfg = self.config
        mean_loss = self.epoch_loss / max(self.epoch_batches, 1)
        self.epoch += 1
        self.batch_in_epoch = 0
        self.epoch_loss = 0.0
        self.epoch_batches = 0
        record = {"kind": "eval", "step": self.step, "epoch": self.epoch, "mean_loss": mean_loss}
        if cfg.eval_every and (self.epoch % cfg.eval_every == 0 or self.epoch == cfg.epochs):
            record.update(evaluate(self.model, self.dataset))
        self.log.append(record)
        log.info("epoch %d  loss %.4f  nmi %s  acc %s", self.epoch, mean_loss, record.get("nmi"),
                 record.get("acc"))
        stop = False
        if self.epoch > cfg.warmup_epochs:
            if mean_loss < self.best_loss:
                self.best_loss = mean_loss
                self.bad_epochs = 0
            else:
                self.bad_epochs += 1
                stop = cfg.patience is not None and self.bad_epochs >= cfg.patience
        if cfg.checkpoint_every and self.epoch % cfg.checkpoint_every == 0:
            self.save()
        return stop


def fit(dataset: Dataset, config: TrainConfig, embedding: Optional[np.ndarray] = None, out_dir=None,
        resume=None, stop_after: Optional[int] = None) -> tuple[MoESimVAE, TrainLog]:
    """Train a model on ``dataset``.

    ``resume`` is a checkpoint (or path) written by an earlier run with the
    same configuration; training continues from its exact state.
    """
    trainer = Trainer(dataset, config, embedding=embedding, out_dir=out_dir)
    if resume is not None:
        trainer.restore(resume if isinstance(resume, Checkpoint) else load_checkpoint(resume))
    trainer.run(stop_after=stop_after)
    return trainer.model, trainer.log


def model_from_checkpoint(ckpt) -> tuple[MoESimVAE, TrainConfig, Checkpoint]:
    ckpt = ckpt if isinstance(ckpt, Checkpoint) else load_checkpoint(ckpt)
    config = from_dict(TrainConfig, ckpt.config)
    model = MoESimVAE(config.model, seed=config.seed)
    model.load_state_arrays(ckpt.tensors)
    return model, config, ckpt
