"""Loss functions returning (scalar, gradient w.r.t. logits)."""

import numpy as np

from ..validation import as_label_array


def cross_entropy(logits, labels):
    """Mean softmax cross entropy over a batch.

    Softmax is applied internally with max-subtraction so large logits
    do not overflow. Returns ``(loss, dlogits)`` with the 1/batch factor
    already folded into the gradient.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = as_label_array(labels, num_classes=logits.shape[1])
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(n), labels]))
    probs = np.exp(shifted - log_z[:, None])
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits
