"""Attacker substrate: an identity embedder and a one-vs-one linear SVM."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.stats import mannwhitneyu

from . import nn
from .artifacts import load_checkpoint, save_checkpoint


# ---------------------------------------------------------------- embedder


@dataclass(frozen=True)
class EmbedderConfig:
    epochs: int = 60
    lr: float = 4e-3
    batch_size: int = 32
    seed: int = 0
    dim: int = 32
    width: int = 16
    radius: float = 16.0


def _embedder_net(cfg: EmbedderConfig, n_classes: int, rng) -> nn.Sequential:
    c = cfg.width
    return nn.Sequential([
        nn.Conv(3, c), nn.LeakyReLU(),
        nn.Conv(c, c), nn.LeakyReLU(), nn.AvgPool2(),
        nn.Conv(c, 2 * c), nn.LeakyReLU(),
        nn.GlobalMeanStd(),
        nn.Dense(4 * c, 128), nn.LeakyReLU(),
        nn.Dense(128, cfg.dim, gain=1.0),
        nn.L2Normalize(),
        nn.Scale(cfg.radius),
        nn.Dense(cfg.dim, n_classes, gain=1.0),
    ], rng=rng)


EMBED_DEPTH = -2  # output of the L2Normalize layer


def _prep(images: np.ndarray) -> np.ndarray:
    x = np.asarray(images)
    x = x.astype(np.float32) / 255.0 if x.dtype == np.uint8 else x.astype(np.float32, copy=False)
    return (x - 0.5) * 4.0


class EmbedderModel:
    """Identity classifier whose normalized penultimate layer is the embedding."""

    def __init__(self, net: nn.Sequential, cfg: EmbedderConfig, n_classes: int, report: dict | None = None):
        self.net = net
        self.cfg = cfg
        self.n_classes = n_classes
        self.report = report or {}
        net.freeze()

    def embed(self, images: np.ndarray) -> np.ndarray:
        x = _prep(images)
        single = x.ndim == 3
        e = nn.predict_batched(self.net, x[None] if single else x, upto=EMBED_DEPTH).astype(np.float64)
        # renormalize in float64 so the unit-norm contract holds to 1e-12
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        return e[0] if single else e

    def weights_hash(self) -> str:
        return nn.weights_hash(self.net.state())

    def save(self, path: str | Path) -> str:
        header = {"kind": "embedder", "config": asdict(self.cfg), "n_classes": self.n_classes}
        return save_checkpoint(path, header, self.net.state())

    @classmethod
    def load(cls, path: str | Path) -> "EmbedderModel":
        header, arrays = load_checkpoint(path)
        cfg = EmbedderConfig(**header["config"])
        net = _embedder_net(cfg, header["n_classes"], np.random.default_rng(0))
        for i, p in enumerate(net.params):
            for k in p:
                p[k] = arrays[f"{i}.{k}"]
        return cls(net, cfg, header["n_classes"])


def train_embedder(images: np.ndarray, labels: np.ndarray, cfg: EmbedderConfig | None = None) -> EmbedderModel:
    cfg = cfg or EmbedderConfig()
    labels = np.asarray(labels)
    classes, y = np.unique(labels, return_inverse=True)
    counts = np.bincount(y)
    if len(classes) < 2:
        raise ValueError("train_embedder needs at least 2 identities")
    if counts.min() < 4:
        raise ValueError(f"train_embedder needs >= 4 photos per identity, smallest class has {counts.min()}")
    x = _prep(images)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xE3B]))
    net = _embedder_net(cfg, len(classes), rng)
    history = nn.fit(net, x, nn.softmax_xent, y, nn.TrainConfig(cfg.epochs, cfg.lr, cfg.batch_size, cfg.seed))
    return EmbedderModel(net, cfg, len(classes), {"train_loss": [float(h) for h in history]})


def cosine_to_confidence(cos: np.ndarray) -> np.ndarray:
    return np.clip(100.0 * (np.asarray(cos) + 1.0) / 2.0, 0.0, 100.0)


def confidence(e: EmbedderModel, a: np.ndarray, b: np.ndarray) -> float:
    """Face-compare style score in [0, 100] from the embedding cosine."""
    ea, eb = e.embed(np.stack([a, b]))
    return float(cosine_to_confidence(ea @ eb))


def pair_scores(emb: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cosines of all same-identity and different-identity pairs."""
    labels = np.asarray(labels)
    sim = emb @ emb.T
    iu = np.triu_indices(len(emb), 1)
    same = labels[iu[0]] == labels[iu[1]]
    return sim[iu][same], sim[iu][~same]


def verification_auc(emb: np.ndarray, labels: np.ndarray) -> float:
    """Probability a same-identity pair outscores a different-identity pair."""
    same, diff = pair_scores(emb, labels)
    u = mannwhitneyu(same, diff, alternative="greater").statistic
    return float(u / (len(same) * len(diff)))


# ---------------------------------------------------------------- one-vs-one SVM


@dataclass(frozen=True)
class OvoConfig:
    lam: float = 1e-3
    epochs: int = 200
    lr: float = 0.5


class OvoClassifier:
    """One linear hinge-loss classifier per class pair, combined by vote.

    Pair (a, b) with a < b votes for a when its score is >= 0. Vote ties go to
    the class with the larger summed signed margin, then to the lower class.
    """

    def __init__(self, classes: np.ndarray, W: np.ndarray, b: np.ndarray, train_accuracy: float = float("nan")):
        self.classes = np.asarray(classes)
        self.pairs = np.array(list(combinations(range(len(self.classes)), 2)), dtype=int).reshape(-1, 2)
        self.W = W
        self.b = b
        self.train_accuracy = train_accuracy

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    def scores(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.W.T + self.b

    def decide(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-class vote counts and summed signed margins, each (N, C)."""
        s = self.scores(X)
        C = len(self.classes)
        Ea = np.zeros((self.n_pairs, C))
        Eb = np.zeros((self.n_pairs, C))
        Ea[np.arange(self.n_pairs), self.pairs[:, 0]] = 1
        Eb[np.arange(self.n_pairs), self.pairs[:, 1]] = 1
        win_a = (s >= 0).astype(np.float64)
        votes = win_a @ Ea + (1 - win_a) @ Eb
        margins = s @ Ea - s @ Eb
        return votes, margins

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X)
        single = X.ndim == 1
        votes, margins = self.decide(X[None] if single else X)
        top = votes == votes.max(axis=1, keepdims=True)
        m = np.where(top, margins, -np.inf)
        best = m == m.max(axis=1, keepdims=True)
        pred = self.classes[np.argmax(best, axis=1)]
        return pred[0] if single else pred


def train_ovo(X: np.ndarray, y: np.ndarray, cfg: OvoConfig | None = None) -> OvoClassifier:
    """Full-batch subgradient descent on every pair's regularized hinge loss at once.

    Deterministic: no sampling, fixed epoch count, step lr/sqrt(t).
    """
    cfg = cfg or OvoConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    classes, yi = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("train_ovo needs at least 2 classes")
    clf = OvoClassifier(classes, None, None)
    # each pair only sees its own two classes: gather them into a padded (P, n, d) stack
    members = [np.flatnonzero(yi == c) for c in range(len(classes))]
    sizes = np.array([len(members[a]) + len(members[b]) for a, b in clf.pairs])
    idx = np.zeros((clf.n_pairs, sizes.max()), dtype=int)
    M = np.zeros(idx.shape)
    for p, (a, b) in enumerate(clf.pairs):
        na, nb = len(members[a]), len(members[b])
        idx[p, :na + nb] = np.concatenate([members[a], members[b]])
        M[p, :na] = 1.0
        M[p, na:na + nb] = -1.0
    Xp = X[idx]
    n_pair = sizes[:, None].astype(np.float64)
    W = np.zeros((clf.n_pairs, X.shape[1]))
    b = np.zeros(clf.n_pairs)
    for t in range(1, cfg.epochs + 1):
        s = np.matmul(Xp, W[:, :, None])[:, :, 0] + b[:, None]
        active = (M * s < 1) & (M != 0)
        G = -(M * active) / n_pair
        step = cfg.lr / np.sqrt(t)
        W -= step * (cfg.lam * W + np.matmul(G[:, None, :], Xp)[:, 0, :])
        b -= step * G.sum(axis=1)
    clf.W, clf.b = W, b
    clf.train_accuracy = float((clf.predict(X) == y).mean() * 100)
    return clf


# ---------------------------------------------------------------- embedding dumps


def save_embeddings(path: str | Path, emb: np.ndarray, ids: np.ndarray, model_hash: str) -> str:
    header = {"kind": "embeddings", "dimension": int(emb.shape[1]), "model_sha256": model_hash,
              "ids": [int(i) for i in ids]}
    return save_checkpoint(path, header, {"embeddings": np.asarray(emb, dtype=np.float64)})


def load_embeddings(path: str | Path) -> tuple[np.ndarray, dict]:
    header, arrays = load_checkpoint(path)
    return arrays["embeddings"], header
