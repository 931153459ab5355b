from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Metrics:
    oa: float
    macc: float
    confusion: np.ndarray
    absent_classes: tuple = ()


def metrics(predictions, labels, num_classes: int | None = None) -> Metrics:
    """Overall accuracy and mean per-class accuracy, both in percent.

    Classes with no labeled samples are left out of the mAcc mean and listed
    in ``absent_classes``.
    """
    pred = np.asarray(predictions, dtype=np.int64)
    lab = np.asarray(labels, dtype=np.int64)
    if pred.shape != lab.shape:
        raise ValueError(f"{pred.size} predictions for {lab.size} labels")
    if lab.size == 0:
        raise ValueError("no samples")
    if num_classes is None:
        num_classes = int(max(pred.max(), lab.max())) + 1
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (lab, pred), 1)
    oa = 100.0 * np.trace(conf) / lab.size
    counts = conf.sum(axis=1)
    present = counts > 0
    per_class = np.diag(conf)[present] / counts[present]
    macc = 100.0 * float(per_class.mean())
    absent = tuple(int(c) for c in np.flatnonzero(~present))
    return Metrics(float(oa), macc, conf, absent)
