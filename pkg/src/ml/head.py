"""Linear task head on pooled sequence embeddings."""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.metrics import confusion_matrix
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import StandardScaler

from src.config import DEFAULT_SEED
from src.ml.metrics import mcc
from src.ml.rng import Stream, stream

logger = logging.getLogger(__name__)

HEAD_LR = 0.5
MAX_STEPS = 10_000
GRAD_TOLERANCE = 1e-6
HELD_OUT_FRACTION = 0.25


class LinearHead(nn.Module):
    """Single logit over a d-dimensional feature vector."""

    def __init__(self, input_dim: int):
        super(LinearHead, self).__init__()
        self.linear = nn.Linear(input_dim, 1, dtype=torch.float64)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, x):
        return self.linear(x).squeeze(-1)


@dataclass
class HeadResult:
    weights: np.ndarray
    bias: float
    steps: int
    converged: bool
    train_mcc: float
    held_out_mcc: Optional[float]
    n_train: int
    n_held_out: int


class TaskHead:
    """Standardize features, then fit a logistic head by full-batch gradient descent."""

    def __init__(self, lr: float = HEAD_LR, max_steps: int = MAX_STEPS, tol: float = GRAD_TOLERANCE):
        self.lr = lr
        self.max_steps = max_steps
        self.tol = tol
        self.scaler = StandardScaler()
        self.model: Optional[LinearHead] = None
        self.steps = 0
        self.converged = False

    def fit(self, features: np.ndarray, labels: np.ndarray) -> "TaskHead":
        x = torch.from_numpy(self.scaler.fit_transform(features).astype(np.float64))
        y = torch.from_numpy(labels.astype(np.float64))
        self.model = LinearHead(x.shape[1])
        optimizer = torch.optim.SGD(self.model.parameters(), lr=self.lr)

        for step in range(1, self.max_steps + 1):
            optimizer.zero_grad()
            loss = F.binary_cross_entropy_with_logits(self.model(x), y)
            loss.backward()
            grad_norm = torch.sqrt(sum(p.grad.pow(2).sum() for p in self.model.parameters())).item()
            self.steps = step
            if grad_norm < self.tol:
                self.converged = True
                break
            optimizer.step()

        logger.info(f"Linear head fitted in {self.steps} steps (converged={self.converged}, loss {loss.item():.4g})")
        return self

    def predict(self, features: np.ndarray) -> np.ndarray:
        if self.model is None:
            raise RuntimeError("head has not been fitted")
        x = torch.from_numpy(self.scaler.transform(features).astype(np.float64))
        with torch.no_grad():
            return (self.model(x) > 0).numpy().astype(np.int64)


def score_mcc(labels: np.ndarray, predicted: np.ndarray) -> float:
    tn, fp, fn, tp = confusion_matrix(labels, predicted, labels=[0, 1]).ravel()
    return mcc(int(tp), int(tn), int(fp), int(fn))


def fit_linear_head(
    features: Sequence[np.ndarray],
    labels: Sequence[int],
    seed: int = DEFAULT_SEED,
    held_out_fraction: float = HELD_OUT_FRACTION,
) -> HeadResult:
    """
    Fit a logistic head and report train and held-out MCC.

    Args:
        features: d-dimensional feature vectors
        labels: Binary labels (0/1)
        seed: Seed of the stratified train/held-out split
        held_out_fraction: Share of examples held out; 0 trains on everything

    Returns:
        HeadResult with weights (in standardized feature space) and MCC scores

    Raises:
        ValueError: If a class has fewer than two examples
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(labels, dtype=np.int64)
    if len(x) != len(y):
        raise ValueError(f"{len(x)} feature vectors but {len(y)} labels")
    if not set(np.unique(y)) <= {0, 1}:
        raise ValueError("labels must be binary (0/1)")
    counts = np.bincount(y, minlength=2)
    if counts.min() < 2:
        raise ValueError(f"need at least two examples per class, got counts {counts.tolist()}")

    if held_out_fraction > 0:
        n_held = min(len(y) - 2, max(2, int(round(held_out_fraction * len(y)))))
        split_seed = int(stream(seed, Stream.SPLIT).integers(2 ** 31))
        x_train, x_held, y_train, y_held = train_test_split(
            x, y, test_size=n_held, stratify=y, random_state=split_seed
        )
    else:
        x_train, y_train = x, y
        x_held = y_held = None

    head = TaskHead().fit(x_train, y_train)
    train_mcc = score_mcc(y_train, head.predict(x_train))
    held_mcc = score_mcc(y_held, head.predict(x_held)) if x_held is not None else None
    logger.info(f"Head MCC train {train_mcc:.3f}, held-out {held_mcc if held_mcc is None else round(held_mcc, 3)}")

    return HeadResult(
        weights=head.model.linear.weight.detach().numpy().ravel().copy(),
        bias=float(head.model.linear.bias.item()),
        steps=head.steps,
        converged=head.converged,
        train_mcc=train_mcc,
        held_out_mcc=held_mcc,
        n_train=len(y_train),
        n_held_out=0 if y_held is None else len(y_held),
    )
