"""Character n-gram TF-IDF features for canonical names.

Every n-gram of length 1..max_n (markers included) is a token. Tokens are
packed into exact 64-bit keys, 5 bits per character, so vocabulary lookup
is a vectorised ``searchsorted`` rather than a Python dict walk. With at
most 31 symbols and max_n <= 12 the packing is collision free.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .corpus import DEFAULT_CONFIG
from .errors import EmptyCorpusError, ModelFormatError, UnknownCharError

MAX_N = 12
_BITS = 5
_DENSE_N = 4  # n-grams up to this length are looked up in a dense table


def idf_weights(df: np.ndarray, n_docs: int) -> np.ndarray:
    return np.log((1.0 + n_docs) / (1.0 + np.asarray(df, dtype=np.float64))) + 1.0


def pooled_length(length: int, max_n: int) -> int:
    """Number of n-gram positions of all lengths 1..max_n in a string."""
    return sum(max(0, length - n + 1) for n in range(1, max_n + 1))


@dataclass(frozen=True)
class SparseVector:
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=np.int64))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))

    @property
    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self.indices.tolist(), self.values.tolist()))

    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.values, self.values)))

    def to_dense(self, dim: int) -> np.ndarray:
        out = np.zeros(dim)
        out[self.indices] = self.values
        return out


class _Encoder:
    def __init__(self, alphabet: str):
        if len(alphabet) >= 2**_BITS:
            raise ValueError("alphabet too large for 5-bit packing")
        self.alphabet = alphabet
        self.table = np.zeros(256, dtype=np.uint64)
        self.valid = np.zeros(256, dtype=bool)
        for i, ch in enumerate(alphabet, start=1):
            self.table[ord(ch)] = i
            self.valid[ord(ch)] = True

    def codes(self, docs: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """Right-zero-padded code matrix (n_docs, max_len) and lengths."""
        lengths = np.fromiter((len(d) for d in docs), dtype=np.int64, count=len(docs))
        width = int(lengths.max()) if len(docs) else 0
        try:
            raw = np.frombuffer("".join(docs).encode("ascii"), dtype=np.uint8)
        except UnicodeEncodeError:
            bad = next(ch for d in docs for ch in d if ord(ch) > 127)
            raise UnknownCharError(f"character {bad!r} not in feature alphabet") from None
        if not self.valid[raw].all():
            bad = chr(int(raw[~self.valid[raw]][0]))
            raise UnknownCharError(f"character {bad!r} not in feature alphabet")
        mat = np.zeros((len(docs), width), dtype=np.uint64)
        mask = np.arange(width)[None, :] < lengths[:, None]
        mat[mask] = self.table[raw]
        return mat, lengths

    def ngram_keys(self, mat: np.ndarray, lengths: np.ndarray, max_n: int):
        """Yield (doc index, key) arrays for every n-gram of lengths 1..max_n."""
        n_docs, width = mat.shape
        for n in range(1, min(max_n, width) + 1):
            span = width - n + 1
            key = np.zeros((n_docs, span), dtype=np.uint64)
            for j in range(n):
                key = (key << np.uint64(_BITS)) | mat[:, j:j + span]
            valid = np.arange(span)[None, :] <= (lengths[:, None] - n)
            rows = np.broadcast_to(np.arange(n_docs)[:, None], valid.shape)[valid]
            yield rows, key[valid]

    def decode(self, key: int) -> str:
        chars = []
        mask = (1 << _BITS) - 1
        while key:
            chars.append(self.alphabet[(key & mask) - 1])
            key >>= _BITS
        return "".join(reversed(chars))

    def encode(self, token: str) -> int:
        key = 0
        for ch in token:
            idx = self.alphabet.find(ch)
            if idx < 0:
                raise UnknownCharError(f"character {ch!r} not in feature alphabet")
            key = (key << _BITS) | (idx + 1)
        return key


class FeatureSpace:
    """Fitted n-gram vocabulary with document frequencies and IDF weights.

    Columns are ordered by packed key, which is deterministic for a given
    alphabet. The vocabulary must be closed under substrings (as any
    vocabulary from `fit_vocab` is); `transform` relies on it to prune
    lookups.
    """

    def __init__(self, max_n: int, keys: np.ndarray, df: np.ndarray, n_docs: int,
                 alphabet: str = DEFAULT_CONFIG.alphabet):
        self.max_n = int(max_n)
        self.keys = np.asarray(keys, dtype=np.uint64)
        self.df = np.asarray(df, dtype=np.int64)
        self.n_docs = int(n_docs)
        self.alphabet = alphabet
        self.idf = idf_weights(self.df, self.n_docs)
        self._encoder = _Encoder(alphabet)
        self._table: np.ndarray | None = None

    def _dense_table(self) -> np.ndarray:
        # column of every key of length <= _DENSE_N, -1 where absent
        if self._table is None:
            table = np.full(1 << (_BITS * _DENSE_N), -1, dtype=np.int64)
            short = self.keys < np.uint64(table.size)
            table[self.keys[short].astype(np.intp)] = np.flatnonzero(short)
            self._table = table
        return self._table

    def __len__(self) -> int:
        return self.keys.size

    @property
    def tokens(self) -> list[str]:
        return [self._encoder.decode(int(k)) for k in self.keys]

    @property
    def token_index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.tokens)}

    def column(self, token: str) -> int | None:
        key = np.uint64(self._encoder.encode(token))
        i = int(np.searchsorted(self.keys, key))
        return i if i < self.keys.size and self.keys[i] == key else None

    def transform(self, docs: Sequence[str]) -> sp.csr_matrix:
        """L2-normalised TF-IDF rows for a batch of canonical strings.

        TF uses the pooled denominator: count of the token over the number
        of n-gram positions of all lengths 1..max_n in the document.
        """
        n_docs = len(docs)
        if n_docs == 0:
            return sp.csr_matrix((0, len(self)))
        mat, lengths = self._encoder.codes(docs)
        rows_all, cols_all = [], []
        width = mat.shape[1]
        # (row, start, key) of every in-vocabulary (n-1)-gram; n = 1 seeds all positions
        valid = np.arange(width)[None, :] < lengths[:, None]
        rows, starts = np.nonzero(valid)
        prev = np.zeros(rows.size, dtype=np.uint64)
        found = valid
        for n in range(1, min(self.max_n, width) + 1):
            if n > 1:
                # the vocabulary holds every substring of its documents, so an
                # n-gram can only be present if both of its (n-1)-grams are
                ok = (starts + n - 1 < lengths[rows])
                ok[ok] = found[rows[ok], starts[ok] + 1]
                rows, starts, prev = rows[ok], starts[ok], prev[ok]
            q = (prev << np.uint64(_BITS)) | mat[rows, starts + n - 1]
            if n <= _DENSE_N:
                pos = self._dense_table()[q.astype(np.intp)]
                hit = pos >= 0
            else:
                pos = np.searchsorted(self.keys, q)
                pos[pos == self.keys.size] = 0
                hit = self.keys[pos] == q if self.keys.size else np.zeros(q.size, dtype=bool)
            rows, starts, prev, pos = rows[hit], starts[hit], q[hit], pos[hit]
            found = np.zeros((n_docs, width), dtype=bool)
            found[rows, starts] = True
            rows_all.append(rows)
            cols_all.append(pos)
            if rows.size == 0:
                break
        rows = np.concatenate(rows_all) if rows_all else np.zeros(0, dtype=np.int64)
        cols = np.concatenate(cols_all) if cols_all else np.zeros(0, dtype=np.int64)
        n_d = np.zeros(n_docs)
        for n in range(1, self.max_n + 1):
            n_d += np.maximum(0, lengths - n + 1)
        counts = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n_docs, len(self)))
        counts.sum_duplicates()
        counts.sort_indices()
        doc_of = np.repeat(np.arange(n_docs), np.diff(counts.indptr))
        counts.data = counts.data / n_d[doc_of] * self.idf[counts.indices]
        sq = np.bincount(doc_of, weights=counts.data**2, minlength=n_docs)
        norms = np.sqrt(sq)
        norms[norms == 0] = 1.0
        counts.data /= norms[doc_of]
        return counts

    def vector(self, doc: str) -> SparseVector:
        row = self.transform([doc])
        return SparseVector(row.indices.copy(), row.data.copy())

    def fingerprint(self) -> str:
        """Short content hash binding a trained model to this vocabulary."""
        h = hashlib.sha256()
        h.update(f"{self.max_n}|{self.alphabet}|{self.n_docs}|".encode())
        h.update(self.keys.astype("<u8").tobytes())
        h.update(self.df.astype("<i8").tobytes())
        return h.hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "max_n": self.max_n,
            "alphabet": self.alphabet,
            "n_docs": self.n_docs,
            "tokens": self.tokens,
            "df": self.df.tolist(),
            "idf": self.idf.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpace":
        enc = _Encoder(d["alphabet"])
        keys = np.array([enc.encode(t) for t in d["tokens"]], dtype=np.uint64)
        if keys.size > 1 and not (keys[1:] > keys[:-1]).all():
            raise ModelFormatError("feature tokens are not in column order")
        space = cls(d["max_n"], keys, np.array(d["df"], dtype=np.int64), d["n_docs"], d["alphabet"])
        if "idf" in d and not np.allclose(space.idf, np.array(d["idf"]), rtol=0, atol=1e-12):
            raise ModelFormatError("stored IDF values disagree with df/n_docs")
        return space


def fit_vocab(corpus: Sequence[str], max_n: int, alphabet: str = DEFAULT_CONFIG.alphabet) -> FeatureSpace:
    """Collect every n-gram of length 1..max_n and its document frequency."""
    if not 1 <= max_n <= MAX_N:
        raise ValueError(f"max_n must be in 1..{MAX_N}, got {max_n}")
    if len(corpus) == 0:
        raise EmptyCorpusError("cannot fit a vocabulary on an empty corpus")
    enc = _Encoder(alphabet)
    mat, lengths = enc.codes(list(corpus))
    docs, keys = zip(*enc.ngram_keys(mat, lengths, max_n))
    docs, keys = np.concatenate(docs), np.concatenate(keys)
    order = np.lexsort((docs, keys))
    docs, keys = docs[order], keys[order]
    # keep the first occurrence of each (key, doc) pair, then count docs per key
    first = np.ones(keys.size, dtype=bool)
    first[1:] = (keys[1:] != keys[:-1]) | (docs[1:] != docs[:-1])
    keys, df = np.unique(keys[first], return_counts=True)
    return FeatureSpace(max_n, keys, df, len(corpus), alphabet)


def tfidf_vector(doc: str, space: FeatureSpace) -> SparseVector:
    return space.vector(doc)
