"""Proxy triplet loss over an identity x slot table of recent embeddings.

The table starts all-zero; unfilled slots never take part in mining. Each
anchor is paired with its farthest filled positive slot (own identity row)
and its closest filled negative slot, and contributes
``max(0, margin + D_pos - D_neg)`` with ``D`` the squared Euclidean distance.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PTB1"
NEG_TABLE = "table"  # every other identity row
NEG_BATCH = "batch"  # only rows of other identities present in the batch


class NoNegativeError(ValueError):
    pass


@dataclass
class ProxyTable:
    entries: np.ndarray  # (n_ids, K, d)
    cursors: np.ndarray  # (n_ids,)
    filled: np.ndarray  # (n_ids, K) bool

    @property
    def n_ids(self) -> int:
        return self.entries.shape[0]

    @property
    def volume(self) -> int:
        return self.entries.shape[1]

    @property
    def dim(self) -> int:
        return self.entries.shape[2]

    def copy(self) -> "ProxyTable":
        return ProxyTable(self.entries.copy(), self.cursors.copy(), self.filled.copy())


@dataclass
class LossValue:
    loss: float
    grads: np.ndarray  # (b, d)
    pos_slot: list  # per anchor (row, slot) or None when skipped
    neg_slot: list
    skipped: list[int] = field(default_factory=list)
    active: np.ndarray | None = None


def table_init(n_ids: int, volume: int = 2, dim: int = 32) -> ProxyTable:
    if n_ids < 2:
        raise ValueError("a proxy table needs at least 2 identities")
    if volume < 1:
        raise ValueError("proxy volume must be >= 1")
    return ProxyTable(np.zeros((n_ids, volume, dim)), np.zeros(n_ids, dtype=np.int64),
                      np.zeros((n_ids, volume), dtype=bool))


def pairwise_sq_dist(f: np.ndarray, slots: np.ndarray) -> np.ndarray:
    """Squared distances from one vector ``f`` to each row of ``slots``."""
    diff = slots - f
    return np.einsum("ij,ij->i", diff, diff)


def _check_batch(table, embeddings, ids):
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
    if len(ids) < 1 or len(ids) != len(embeddings):
        raise ValueError("batch needs >= 1 anchor and one identity per embedding")
    if np.any(ids < 0) or np.any(ids >= table.n_ids):
        raise IndexError(f"identity out of range for a {table.n_ids}-row table")
    if embeddings.shape[1] != table.dim:
        raise ValueError(f"embedding dim {embeddings.shape[1]} != table dim {table.dim}")
    return embeddings, ids


def mine_and_loss(table: ProxyTable, embeddings, ids, margin: float = 0.5,
                  negatives: str = NEG_TABLE) -> LossValue:
    """Hard-mined proxy triplet loss; read-only on ``table``.

    Anchors whose own row is still empty are skipped and listed in
    ``skipped``. Raises :class:`NoNegativeError` when some scored anchor has no
    filled negative slot. Ties go to the lowest ``(row, slot)``.
    """
    embeddings, ids = _check_batch(table, embeddings, ids)
    b, d = embeddings.shape
    K = table.volume
    flat = table.entries.reshape(-1, d)
    flat_filled = table.filled.ravel()
    flat_row = np.repeat(np.arange(table.n_ids), K)
    batch_rows = set(ids.tolist())

    grads = np.zeros((b, d))
    pos_slot, neg_slot, skipped = [], [], []
    active = np.zeros(b, dtype=bool)
    loss = 0.0
    for i in range(b):
        f, row = embeddings[i], ids[i]
        pos_idx = np.flatnonzero(flat_filled & (flat_row == row))
        if pos_idx.size == 0:
            skipped.append(i)
            pos_slot.append(None)
            neg_slot.append(None)
            continue
        neg_mask = flat_filled & (flat_row != row)
        if negatives == NEG_BATCH:
            neg_mask &= np.isin(flat_row, list(batch_rows - {int(row)}))
        neg_idx = np.flatnonzero(neg_mask)
        if neg_idx.size == 0:
            raise NoNegativeError(f"anchor {i} (identity {row}) has no filled negative proxy")
        d_pos = pairwise_sq_dist(f, flat[pos_idx])
        d_neg = pairwise_sq_dist(f, flat[neg_idx])
        p = int(pos_idx[np.argmax(d_pos)])
        n = int(neg_idx[np.argmin(d_neg)])
        pos_slot.append(divmod(p, K))
        neg_slot.append(divmod(n, K))
        hinge = margin + float(np.max(d_pos)) - float(np.min(d_neg))
        if hinge > 0:
            loss += hinge
            active[i] = True
            # d/df [D(f,p) - D(f,n)] = 2(f-p) - 2(f-n)
            grads[i] = 2.0 * (f - flat[p]) - 2.0 * (f - flat[n])
    return LossValue(loss, grads, pos_slot, neg_slot, skipped, active)


def table_update(table: ProxyTable, embeddings, ids) -> ProxyTable:
    """FIFO write of each anchor into its identity row; mutates and returns ``table``."""
    embeddings, ids = _check_batch(table, embeddings, ids)
    for f, row in zip(embeddings, ids):
        c = table.cursors[row]
        table.entries[row, c] = f
        table.filled[row, c] = True
        table.cursors[row] = (c + 1) % table.volume
    return table


def classification_loss(logits, identity) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy (summed over a batch) and its gradient w.r.t. logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(identity))
    n = logits.shape[1]
    if np.any(labels < 0) or np.any(labels >= n):
        raise IndexError(f"identity label out of range for {n} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(labels))
    loss = float(np.sum(logsum - shifted[rows, labels]))
    grad = np.exp(shifted - logsum[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad


def save_table(table: ProxyTable, path) -> None:
    n, k, d = table.entries.shape
    header = struct.pack("<3i", n, k, d)
    cursors = struct.pack(f"<{n}i", *table.cursors.tolist())
    bitmap = np.packbits(table.filled.ravel(), bitorder="little").tobytes()
    body = table.entries.astype("<f8").tobytes()
    Path(path).write_bytes(MAGIC + header + cursors + bitmap + body)


def load_table(path) -> ProxyTable:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a PTB1 checkpoint")
    n, k, d = struct.unpack_from("<3i", data, 4)
    pos = 16
    cursors = np.array(struct.unpack_from(f"<{n}i", data, pos), dtype=np.int64)
    pos += 4 * n
    nbytes = (n * k + 7) // 8
    filled = np.unpackbits(np.frombuffer(data, np.uint8, nbytes, pos), bitorder="little")[:n * k]
    pos += nbytes
    entries = np.frombuffer(data, "<f8", n * k * d, pos).astype(np.float64).reshape(n, k, d)
    return ProxyTable(entries, cursors, filled.reshape(n, k).astype(bool))
