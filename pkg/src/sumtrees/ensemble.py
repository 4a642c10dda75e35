"""Frozen posterior tree ensembles and their prediction kernels.

Kept trees are stored flat in preorder. For node ``i`` the left child is
``i + 1`` and the right child is ``i + right[i]``; leaves have ``feat == -1``.
``offsets[s * m + t]`` is the first node of tree ``t`` in kept sample ``s``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .dataset import ModelFrame
from .priors import CalibratedPriors, Hyperparameters
from .tree import goes_left_value


@dataclass
class TraceSegment:
    """Per-iteration diagnostics recorded by one chain (burn-in included)."""

    sigma_sq: np.ndarray
    acceptance: np.ndarray
    mean_leaves: np.ndarray
    mean_depth: np.ndarray
    burn_in: int


@dataclass
class PosteriorEnsemble:
    feat: np.ndarray
    split: np.ndarray
    mia: np.ndarray
    right: np.ndarray
    leaf: np.ndarray
    offsets: np.ndarray
    num_trees: int
    sigma_sq: np.ndarray
    hyper: Hyperparameters
    priors: CalibratedPriors
    frame: ModelFrame
    traces: list[TraceSegment] = field(default_factory=list)
    chain_sizes: list[int] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    train_seconds: float = 0.0

    @property
    def num_samples(self) -> int:
        return (len(self.offsets) - 1) // self.num_trees

    @property
    def is_classification(self) -> bool:
        return self.frame.is_classification

    @property
    def p(self) -> int:
        return self.frame.p

    def tree_nodes(self, sample: int, tree: int) -> slice:
        k = sample * self.num_trees + tree
        return slice(int(self.offsets[k]), int(self.offsets[k + 1]))

    def draws(self, x: np.ndarray, threads: int = 1) -> np.ndarray:
        """Sum-of-trees value for every kept sample and row, shape (samples, rows)."""
        x = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=float)))
        if x.shape[1] != self.p:
            raise ValueError(f"expected {self.p} columns, got {x.shape[1]}")
        if np.isnan(x).any() and not self.hyper.use_missing_data:
            raise ValueError("missing values in new data but the model was built without missing-data support")
        out = np.empty((self.num_samples, x.shape[0]))
        args = (self.feat, self.split, self.mia, self.right, self.leaf, self.offsets, self.num_trees)
        if threads <= 1 or x.shape[0] < 2 * threads:
            predict_draws(*args, x, out)
            return out
        bounds = np.linspace(0, x.shape[0], threads + 1).astype(int)

        def work(k: int) -> None:
            lo, hi = bounds[k], bounds[k + 1]
            predict_draws(*args, x[lo:hi], out[:, lo:hi])

        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(work, range(threads)))
        return out

    def split_features(self) -> np.ndarray:
        return self.feat[self.feat >= 0]


@njit(cache=True, nogil=True)
def predict_draws(feat, split, mia, right, leaf, offsets, m, x, out):
    n_samples = (offsets.shape[0] - 1) // m
    for s in range(n_samples):
        for i in range(x.shape[0]):
            total = 0.0
            for t in range(m):
                node = offsets[s * m + t]
                while feat[node] >= 0:
                    if goes_left_value(x[i, feat[node]], split[node], mia[node]):
                        node += 1
                    else:
                        node += right[node]
                total += leaf[node]
            out[s, i] = total


@njit(cache=True)
def count_inclusions(feat, p):
    counts = np.zeros(p)
    for i in range(feat.shape[0]):
        if feat[i] >= 0:
            counts[feat[i]] += 1.0
    return counts


@njit(cache=True)
def count_interactions(feat, right, offsets, p):
    """Parent/child split-variable pair counts over every stored tree."""
    mat = np.zeros((p, p))
    for k in range(offsets.shape[0] - 1):
        lo = offsets[k]
        hi = offsets[k + 1]
        for node in range(lo, hi):
            j = feat[node]
            if j < 0:
                continue
            lft = node + 1
            rgt = node + right[node]
            if feat[lft] >= 0:
                mat[j, feat[lft]] += 1.0
            if feat[rgt] >= 0:
                mat[j, feat[rgt]] += 1.0
    return mat


@njit(cache=True)
def tree_shapes(feat, right, offsets):
    """Leaf count and depth of every stored tree."""
    n_trees = offsets.shape[0] - 1
    leaves = np.zeros(n_trees, np.int64)
    depths = np.zeros(n_trees, np.int64)
    stack_node = np.zeros(256, np.int64)
    stack_depth = np.zeros(256, np.int64)
    for k in range(n_trees):
        top = 0
        stack_node[0] = offsets[k]
        stack_depth[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack_node[top]
            d = stack_depth[top]
            if d > depths[k]:
                depths[k] = d
            if feat[node] < 0:
                leaves[k] += 1
                continue
            if top + 2 > stack_node.shape[0]:
                stack_node = np.concatenate((stack_node, np.zeros(stack_node.shape[0], np.int64)))
                stack_depth = np.concatenate((stack_depth, np.zeros(stack_depth.shape[0], np.int64)))
            stack_node[top] = node + right[node]
            stack_depth[top] = d + 1
            stack_node[top + 1] = node + 1
            stack_depth[top + 1] = d + 1
            top += 2
    return leaves, depths
