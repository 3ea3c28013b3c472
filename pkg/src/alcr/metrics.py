"""Edit distance and character error rates."""
from alcr import kernels


def edit_distance(a, b):
    """Levenshtein distance between two sequences (strings or token lists)."""
    return kernels.edit_distance(a, b)


def cer(pairs):
    """Micro-averaged character error rate in percent over (reference, hypothesis) pairs."""
    edits = 0
    total = 0
    for ref, hyp in pairs:
        edits += edit_distance(ref, hyp)
        total += len(ref)
    if total == 0:
        raise ValueError("CER undefined: total reference length is zero")
    return 100.0 * edits / total


def p_cer(pseudo_labels, ground_truth):
    """CER of pseudo-labels against ground truth, both keyed by utterance id."""
    if not pseudo_labels:
        raise ValueError("P-CER undefined for an empty pseudo-labelled set")
    if set(pseudo_labels) != set(ground_truth):
        raise KeyError("pseudo-label ids do not match ground-truth ids")
    return cer((ground_truth[k], pseudo_labels[k]) for k in sorted(pseudo_labels))
