"""Pre-training loop: batching, masking, forward/backward, AdamW steps,
temperature clamping, checkpointing, and the objective-mode ablations.

All randomness is keyed by (seed, epoch, instance/batch index), so a run
is a pure function of (config, data, seed) and an interrupted run resumed
from a checkpoint continues bit-identically.
"""

from __future__ import annotations

import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import OBJECTIVE_MODES, TrainSection
from .corpus import (
    LabelDictionary,
    PreprocessConfig,
    Vocab,
    apply_blank_masking,
    apply_mlm_masking,
    insert_entity_markers,
    label_sequence,
    mask_rng,
)
from .encoder import (
    BiEncoder,
    EncoderConfig,
    encode_batch,
    init_encoder_params,
    mlm_logits_batch,
    pool_label_batch,
    pool_sentence_batch,
)
from .errors import CheckpointError, DataError, NumericalError
from .losses import (
    BatchPairing,
    Temperature,
    cosine_similarity_matrix,
    mlm_loss_pair,
    scl_label_loss,
    scl_sentence_loss,
)
from .optim import AdamW
from .seeding import derive_rng
from .tensor import Tensor, backward, no_grad


@dataclass
class TrainLogRecord:
    step: int
    epoch: int
    scl_s: float
    scl_l: float
    scl: float
    mlm_s: float
    mlm_l: float
    mlm: float
    total: float
    tau: float
    wall_ms: float
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "step": self.step,
            "epoch": self.epoch,
            "scl_s": self.scl_s,
            "scl_l": self.scl_l,
            "scl": self.scl,
            "mlm_s": self.mlm_s,
            "mlm_l": self.mlm_l,
            "mlm": self.mlm,
            "total": self.total,
            "tau": self.tau,
            "wall_ms": self.wall_ms,
        }
        out.update(self.extras)
        return out


@dataclass
class TrainingBatch:
    """Masked, index-resolved inputs for one optimizer step."""

    epoch: int
    index: int
    sentence_seqs: list
    e1_positions: list
    e2_positions: list
    sent_mlm_rows: np.ndarray
    sent_mlm_cols: np.ndarray
    sent_mlm_targets: np.ndarray
    label_order: list
    label_seqs: list
    label_mlm_rows: np.ndarray
    label_mlm_cols: np.ndarray
    label_mlm_targets: np.ndarray
    pair_index: np.ndarray
    positives: list


def _epoch_order(n: int, instances, cfg: TrainSection, epoch: int) -> np.ndarray:
    if cfg.class_balanced:
        rng = derive_rng(cfg.rng_seed, epoch, "balance")
        by_rel: dict = {}
        for i, inst in enumerate(instances):
            by_rel.setdefault(inst.relation_id, []).append(i)
        groups = [np.array(v) for _, v in sorted(by_rel.items())]
        for g in groups:
            rng.shuffle(g)
        rng.shuffle(groups)
        order = []
        longest = max(len(g) for g in groups)
        for pos in range(longest):
            for g in groups:
                if pos < len(g):
                    order.append(g[pos])
        return np.array(order, dtype=np.intp)
    return derive_rng(cfg.rng_seed, epoch, "shuffle").permutation(n)


def epoch_batches(
    instances,
    marked,
    label_seq_of: dict,
    pre_cfg: PreprocessConfig,
    cfg: TrainSection,
    epoch: int,
):
    """Mini-batches for one epoch; every instance appears exactly once.

    Blank and MLM masks are resampled for each instance every epoch; label
    sequences are re-masked per batch they appear in.
    """
    n = len(instances)
    if n == 0:
        raise DataError("cannot batch an empty corpus")
    if n < cfg.batch_size:
        warnings.warn(
            f"corpus of {n} sentences is smaller than batch_size={cfg.batch_size}; "
            "emitting a single smaller batch"
        )
    order = _epoch_order(n, instances, cfg, epoch)

    batches = []
    for b, lo in enumerate(range(0, n, cfg.batch_size)):
        idx = order[lo : lo + cfg.batch_size]
        seqs, e1s, e2s = [], [], []
        s_rows, s_cols, s_tgts = [], [], []
        rids = []
        for row, i in enumerate(idx):
            inst = instances[i]
            m = apply_blank_masking(marked[i], pre_cfg, mask_rng(cfg.rng_seed, epoch, int(i)))
            tokens, targets = apply_mlm_masking(
                m.tokens, pre_cfg, mask_rng(cfg.rng_seed, epoch, int(i), "mlm")
            )
            seqs.append(tokens)
            e1s.append(m.pos_e1s)
            e2s.append(m.pos_e2s)
            for pos in sorted(targets):
                s_rows.append(row)
                s_cols.append(pos)
                s_tgts.append(targets[pos])
            rids.append(inst.relation_id)

        label_order = []
        row_of = {}
        for rid in rids:
            if rid not in row_of:
                row_of[rid] = len(label_order)
                label_order.append(rid)
        pair_index = np.array([row_of[r] for r in rids], dtype=np.intp)
        positives = [np.flatnonzero(pair_index == j) for j in range(len(label_order))]

        l_seqs = []
        l_rows, l_cols, l_tgts = [], [], []
        for row, rid in enumerate(label_order):
            rng = derive_rng(cfg.rng_seed, epoch, b, row, "label-mlm")
            tokens, targets = apply_mlm_masking(label_seq_of[rid], pre_cfg, rng)
            l_seqs.append(tokens)
            for pos in sorted(targets):
                l_rows.append(row)
                l_cols.append(pos)
                l_tgts.append(targets[pos])

        batches.append(
            TrainingBatch(
                epoch=epoch,
                index=b,
                sentence_seqs=seqs,
                e1_positions=e1s,
                e2_positions=e2s,
                sent_mlm_rows=np.array(s_rows, dtype=np.intp),
                sent_mlm_cols=np.array(s_cols, dtype=np.intp),
                sent_mlm_targets=np.array(s_tgts, dtype=np.intp),
                label_order=label_order,
                label_seqs=l_seqs,
                label_mlm_rows=np.array(l_rows, dtype=np.intp),
                label_mlm_cols=np.array(l_cols, dtype=np.intp),
                label_mlm_targets=np.array(l_tgts, dtype=np.intp),
                pair_index=pair_index,
                positives=positives,
            )
        )
    return batches


class Trainer:
    """Owns the bi-encoder, optimizer, and the deterministic batch stream."""

    def __init__(
        self,
        instances,
        label_dict: LabelDictionary,
        vocab: Vocab,
        enc_cfg: EncoderConfig,
        pre_cfg: PreprocessConfig,
        cfg: TrainSection,
    ):
        if cfg.objective_mode not in OBJECTIVE_MODES:
            raise DataError(f"unknown objective mode '{cfg.objective_mode}'")
        self.instances = list(instances)
        self.label_dict = label_dict
        self.vocab = vocab
        self.enc_cfg = enc_cfg
        self.pre_cfg = pre_cfg
        self.cfg = cfg

        for inst in self.instances:
            if inst.relation_id not in label_dict:
                raise DataError(f"relation '{inst.relation_id}' missing from label dictionary")
        self.marked = [insert_entity_markers(inst, enc_cfg.max_seq_len) for inst in self.instances]
        self.label_seq_of = {
            rid: label_sequence(label_dict[rid], vocab, enc_cfg.max_seq_len)
            for rid in label_dict.relation_ids()
        }

        self.model = BiEncoder(
            label_params=init_encoder_params(enc_cfg, derive_rng(cfg.rng_seed, "label-encoder-init")),
            sentence_params=init_encoder_params(
                enc_cfg, derive_rng(cfg.rng_seed, "sentence-encoder-init")
            ),
            temperature=Temperature(
                tensor=Tensor(np.asarray(cfg.tau_init), requires_grad=True),
                minimum=cfg.tau_min,
            ),
        )
        self.params = self.model.leaves()
        self.optimizer = AdamW(
            self.params,
            lr=cfg.learning_rate,
            betas=(cfg.beta1, cfg.beta2),
            eps=cfg.eps,
            weight_decay=cfg.weight_decay,
        )
        self.global_step = 0

    @property
    def steps_per_epoch(self) -> int:
        return max(1, -(-len(self.instances) // self.cfg.batch_size))

    # -- one optimizer step ---------------------------------------------

    def _forward_losses(self, batch: TrainingBatch):
        tau = self.model.temperature
        bh_s = encode_batch(self.model.sentence_params, batch.sentence_seqs)
        S = pool_sentence_batch(bh_s, batch.e1_positions, batch.e2_positions)
        bh_l = encode_batch(self.model.label_params, batch.label_seqs)
        L = pool_label_batch(bh_l)
        pairing = BatchPairing(
            sentence_embs=S,
            label_embs=L,
            pair_index=batch.pair_index,
            positives=batch.positives,
        )
        cos = cosine_similarity_matrix(S, L)

        mode = self.cfg.objective_mode
        use_s = mode in ("full", "sentence_anchored_only", "no_mlm")
        use_l = mode in ("full", "label_anchored_only", "no_mlm")
        use_mlm = mode != "no_mlm"

        def contrastive(fn, active, **kw):
            if active:
                return fn(pairing, tau, cos=cos, **kw)
            with no_grad():
                return fn(pairing, tau, cos=Tensor(cos.data), **kw)

        scl_s = contrastive(scl_sentence_loss, use_s)
        scl_l = contrastive(
            scl_label_loss, use_l, normalize_positives=self.cfg.label_loss_normalized
        )

        def mlm_term(params, bh, rows, cols, targets):
            if use_mlm:
                logits = mlm_logits_batch(params, bh, rows, cols)
                return T.masked_cross_entropy(logits, targets)
            with no_grad():
                logits = mlm_logits_batch(params, bh, rows, cols)
                return T.masked_cross_entropy(Tensor(logits.data), targets)

        mlm_s = mlm_term(
            self.model.sentence_params, bh_s, batch.sent_mlm_rows, batch.sent_mlm_cols,
            batch.sent_mlm_targets,
        )
        mlm_l = mlm_term(
            self.model.label_params, bh_l, batch.label_mlm_rows, batch.label_mlm_cols,
            batch.label_mlm_targets,
        )

        half = Tensor(np.asarray(0.5))
        parts = []
        if use_s:
            parts.append(T.mul(scl_s, half))
        if use_l:
            parts.append(T.mul(scl_l, half))
        if use_mlm:
            parts.append(T.add(mlm_s, mlm_l))
        total = parts[0]
        for p in parts[1:]:
            total = T.add(total, p)
        return total, scl_s, scl_l, mlm_s, mlm_l

    def pretrain_step(self, batch: TrainingBatch) -> TrainLogRecord:
        t0 = time.perf_counter()
        total, scl_s, scl_l, mlm_s, mlm_l = self._forward_losses(batch)
        if not np.isfinite(total.data):
            raise NumericalError(
                f"non-finite loss at epoch {batch.epoch} batch {batch.index}"
            )
        self.optimizer.zero_grad()
        backward(total, leaves=[t for _, t in self.params])
        self.optimizer.step()
        self.model.temperature.clamp()
        self.global_step += 1
        return TrainLogRecord(
            step=self.global_step,
            epoch=batch.epoch,
            scl_s=float(scl_s.data),
            scl_l=float(scl_l.data),
            scl=float(scl_s.data) + float(scl_l.data),
            mlm_s=float(mlm_s.data),
            mlm_l=float(mlm_l.data),
            mlm=float(mlm_s.data) + float(mlm_l.data),
            total=float(total.data),
            tau=self.model.temperature.value,
            wall_ms=(time.perf_counter() - t0) * 1e3,
        )

    # -- whole run --------------------------------------------------------

    def run(self, on_record=None, checkpoint_dir=None):
        """Train from the current step to the configured epoch count."""
        records = []
        spe = self.steps_per_epoch
        start_epoch = self.global_step // spe
        for epoch in range(start_epoch, self.cfg.epochs):
            batches = epoch_batches(
                self.instances, self.marked, self.label_seq_of, self.pre_cfg, self.cfg, epoch
            )
            start_index = self.global_step % spe if epoch == start_epoch else 0
            for batch in batches[start_index:]:
                record = self.pretrain_step(batch)
                if self.cfg.eval_every and self.global_step % self.cfg.eval_every == 0:
                    record.extras.update(self._diagnostics())
                records.append(record)
                if on_record is not None:
                    on_record(record)
                if (
                    checkpoint_dir
                    and self.cfg.checkpoint_every
                    and self.global_step % self.cfg.checkpoint_every == 0
                ):
                    self.save(os.path.join(checkpoint_dir, f"checkpoint_{self.global_step:06d}.ckpt"))
        return records

    def _diagnostics(self, sample: int = 128) -> dict:
        """align/uniform on a fixed sample of the training data."""
        from .encoder import embed_labels, embed_sentences
        from .metrics import align_metric, uniform_metric

        idx = derive_rng(self.cfg.rng_seed, "diagnostic-sample").permutation(
            len(self.instances)
        )[:sample]
        marked = [self.marked[i] for i in idx]
        rids = [self.instances[i].relation_id for i in idx]
        distinct = sorted(set(rids))
        if len(distinct) < 2 or len(idx) < 2:
            return {}
        s_embs = embed_sentences(self.model, marked)
        l_embs = embed_labels(self.model, [self.label_seq_of[r] for r in distinct])
        row_of = {r: j for j, r in enumerate(distinct)}
        pairs = [(s_embs[i], l_embs[row_of[r]]) for i, r in enumerate(rids)]
        return {
            "diag_align": align_metric(pairs),
            "diag_uniform": uniform_metric(s_embs, l_embs),
        }

    # -- checkpointing ------------------------------------------------------

    def save(self, path):
        tensors = [(name, t.data) for name, t in self.params]
        tensors += self.optimizer.state_tensors()
        meta = {
            "step": self.global_step,
            "optimizer_step": self.optimizer.step_count,
            "corpus_size": len(self.instances),
            "vocab_size": len(self.vocab),
            "d": self.enc_cfg.d,
            "n_layers": self.enc_cfg.n_layers,
        }
        save_checkpoint(path, tensors, meta)

    def load(self, path):
        arrays, meta = load_checkpoint(path)
        for name, t in self.params:
            if name not in arrays:
                raise CheckpointError(f"checkpoint is missing tensor '{name}'")
            arr = arrays[name]
            if arr.shape != t.data.shape:
                raise CheckpointError(
                    f"tensor '{name}' has shape {arr.shape} in checkpoint, "
                    f"model expects {t.data.shape}"
                )
            t.data = arr.copy()
        self.optimizer.load_state(arrays, meta.get("optimizer_step", meta.get("step", 0)))
        self.global_step = int(meta.get("step", 0))
        return self

    @classmethod
    def restore(cls, path, instances, label_dict, vocab, enc_cfg, pre_cfg, cfg) -> "Trainer":
        trainer = cls(instances, label_dict, vocab, enc_cfg, pre_cfg, cfg)
        return trainer.load(path)


def load_bi_encoder(path, enc_cfg: EncoderConfig, tau_min: float = 0.01) -> BiEncoder:
    """Read only the model tensors of a checkpoint (for evaluation)."""
    arrays, _ = load_checkpoint(path)
    model = BiEncoder(
        label_params=init_encoder_params(enc_cfg, derive_rng(0, "load-placeholder-l")),
        sentence_params=init_encoder_params(enc_cfg, derive_rng(0, "load-placeholder-s")),
        temperature=Temperature(minimum=tau_min),
    )
    for name, t in model.leaves():
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing tensor '{name}'")
        arr = arrays[name]
        if arr.shape != t.data.shape:
            raise CheckpointError(
                f"tensor '{name}' has shape {arr.shape} in checkpoint, "
                f"model expects {t.data.shape}"
            )
        t.data = arr.copy()
    return model
