"""Synthetic dataset generators and on-disk formats.

Formats are deliberately plain: Matrix Market coordinate files for design
matrices (scipy handles the round trip), a dense text vector for responses,
the bag-of-words triple format `docID wordID count` (1-based, three header
lines) for corpora, and one integer class id per line for labels. Every
generator writes a ground-truth sidecar next to the data.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse

from .errors import ConfigurationError


# ---------------------------------------------------------------------------
# lasso


@dataclass
class LassoDataset:
    X: np.ndarray
    y: np.ndarray
    true_support: np.ndarray
    true_coef: np.ndarray


def gen_lasso(
    n: int,
    m: int,
    k_true: int,
    seed: int = 0,
    noise: float = 0.01,
    block_size: int = 0,
    block_rho: float = 0.0,
) -> LassoDataset:
    """Planted-sparsity regression instance.

    With ``block_size`` > 0, consecutive column blocks share a latent factor
    with correlation ``block_rho``, giving the dependency structure that
    structure-aware scheduling exploits.
    """
    if k_true > m:
        raise ConfigurationError("k_true cannot exceed m")
    rng = np.random.default_rng(seed)
    if block_size > 0:
        if not (0 <= block_rho < 1):
            raise ConfigurationError("block_rho must be in [0, 1)")
        X = np.empty((n, m))
        for start in range(0, m, block_size):
            width = min(block_size, m - start)
            common = rng.normal(size=(n, 1))
            noise_cols = rng.normal(size=(n, width))
            X[:, start : start + width] = (
                np.sqrt(block_rho) * common + np.sqrt(1 - block_rho) * noise_cols
            )
    else:
        X = rng.normal(size=(n, m))
    support = np.sort(rng.choice(m, size=k_true, replace=False))
    coef = np.zeros(m)
    signs = rng.choice([-1.0, 1.0], size=k_true)
    coef[support] = signs * rng.uniform(0.5, 2.0, size=k_true)
    y = X @ coef + noise * rng.normal(size=n)
    return LassoDataset(X=X, y=y, true_support=support, true_coef=coef)


def write_lasso(ds: LassoDataset, out_dir: str, stem: str = "lasso") -> dict:
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "X": os.path.join(out_dir, f"{stem}_X.mtx"),
        "y": os.path.join(out_dir, f"{stem}_y.txt"),
        "truth": os.path.join(out_dir, f"{stem}_truth.txt"),
    }
    scipy.io.mmwrite(paths["X"], scipy.sparse.coo_matrix(ds.X))
    np.savetxt(paths["y"], ds.y, fmt="%.17g")
    with open(paths["truth"], "w") as f:
        for j, c in zip(ds.true_support, ds.true_coef[ds.true_support]):
            f.write(f"{j} {c:.17g}\n")
    return paths


def read_lasso(x_path: str, y_path: str) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(scipy.io.mmread(x_path).todense())
    y = np.loadtxt(y_path)
    return X, y


# ---------------------------------------------------------------------------
# lda


@dataclass
class LdaCorpus:
    docs: list[list[int]]  # token lists
    V: int
    K: int
    true_topic_words: list[list[int]]  # word ids owned by each generating topic


def gen_lda(
    n_docs: int,
    V: int,
    K: int,
    mean_doc_len: int,
    seed: int = 0,
    zipf_s: float = 1.0,
) -> LdaCorpus:
    """Power-law corpus from a planted topic model.

    Word ranks carry Zipf(s) weight; rank r belongs to generating topic
    r mod K, so an even topic mixture leaves the corpus-wide rank-frequency
    curve on the Zipf slope.
    """
    rng = np.random.default_rng(seed)
    weights = (np.arange(1, V + 1, dtype=float)) ** (-zipf_s)
    topic_words = [list(range(k, V, K)) for k in range(K)]
    topic_dists = []
    for k in range(K):
        w = np.zeros(V)
        w[topic_words[k]] = weights[topic_words[k]]
        topic_dists.append(w / w.sum())
    docs: list[list[int]] = []
    for _ in range(n_docs):
        length = max(1, int(rng.poisson(mean_doc_len)))
        theta = rng.dirichlet(np.full(K, 1.0))
        topics = rng.choice(K, size=length, p=theta)
        doc = [int(rng.choice(V, p=topic_dists[k])) for k in topics]
        docs.append(doc)
    return LdaCorpus(docs=docs, V=V, K=K, true_topic_words=topic_words)


def rank_frequency_slope(docs: list[list[int]], top: int = 30) -> float:
    """Least-squares slope of log frequency vs log rank over the top ranks."""
    counts = np.bincount([w for doc in docs for w in doc])
    freq = np.sort(counts[counts > 0])[::-1][:top].astype(float)
    ranks = np.arange(1, len(freq) + 1, dtype=float)
    return float(np.polyfit(np.log(ranks), np.log(freq), 1)[0])


def write_corpus(corpus: LdaCorpus, out_dir: str, stem: str = "lda") -> dict:
    """Bag-of-words triples: three header lines (D, W, NNZ), then
    `docID wordID count` with 1-based ids."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "docs": os.path.join(out_dir, f"{stem}_docs.txt"),
        "truth": os.path.join(out_dir, f"{stem}_truth.txt"),
    }
    triples = []
    for d, doc in enumerate(corpus.docs):
        counts = np.bincount(doc, minlength=corpus.V)
        for w in np.nonzero(counts)[0]:
            triples.append((d + 1, int(w) + 1, int(counts[w])))
    with open(paths["docs"], "w") as f:
        f.write(f"{len(corpus.docs)}\n{corpus.V}\n{len(triples)}\n")
        for d, w, c in triples:
            f.write(f"{d} {w} {c}\n")
    with open(paths["truth"], "w") as f:
        for k, words in enumerate(corpus.true_topic_words):
            f.write(f"{k} " + " ".join(str(w) for w in words) + "\n")
    return paths


def read_corpus(path: str) -> tuple[list[list[int]], int]:
    """Read bag-of-words triples back into token lists (repeated per count)."""
    with open(path) as f:
        lines = f.read().split()
    D, V, nnz = int(lines[0]), int(lines[1]), int(lines[2])
    docs: list[list[int]] = [[] for _ in range(D)]
    vals = lines[3:]
    if len(vals) != 3 * nnz:
        raise ConfigurationError(f"expected {3 * nnz} triple fields, got {len(vals)}")
    for i in range(nnz):
        d, w, c = int(vals[3 * i]) - 1, int(vals[3 * i + 1]) - 1, int(vals[3 * i + 2])
        docs[d].extend([w] * c)
    return docs, V


# ---------------------------------------------------------------------------
# mlr


@dataclass
class MlrDataset:
    U: np.ndarray
    y: np.ndarray
    K: int
    true_centers: np.ndarray


def gen_mlr(
    n: int, D: int, K: int, seed: int = 0, margin: float = 4.0, spread: float = 1.0
) -> MlrDataset:
    """Linearly separable classes: well-separated Gaussian blobs."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(K, D))
    centers *= margin / np.linalg.norm(centers, axis=1, keepdims=True)
    y = rng.integers(K, size=n)
    U = centers[y] + spread * 0.1 * rng.normal(size=(n, D))
    return MlrDataset(U=U, y=y, K=K, true_centers=centers)


def write_mlr(ds: MlrDataset, out_dir: str, stem: str = "mlr") -> dict:
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "U": os.path.join(out_dir, f"{stem}_U.mtx"),
        "y": os.path.join(out_dir, f"{stem}_y.txt"),
        "truth": os.path.join(out_dir, f"{stem}_truth.txt"),
    }
    scipy.io.mmwrite(paths["U"], scipy.sparse.coo_matrix(ds.U))
    np.savetxt(paths["y"], ds.y, fmt="%d")
    np.savetxt(paths["truth"], ds.true_centers, fmt="%.17g")
    return paths


def read_mlr(u_path: str, y_path: str) -> tuple[np.ndarray, np.ndarray]:
    U = np.asarray(scipy.io.mmread(u_path).todense())
    y = np.loadtxt(y_path).astype(int)
    return U, y
