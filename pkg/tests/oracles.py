"""Independent reference implementations used as test oracles.

Written in plain Python / mpmath, deliberately sharing no code with the package.
"""
import math

import mpmath

LABELS = (
    "negative_for_pe", "indeterminate", "leftsided", "rightsided", "central",
    "rvlv_gte_1", "rvlv_lt_1", "chronic", "acute_and_chronic",
)
EPS = 1e-7


def window_scalar(hu, level, width):
    v = (hu - (level - width / 2.0)) / width
    return min(1.0, max(0.0, v))


def _term(y, p):
    lp = math.log(max(p, EPS))
    lq = math.log(max(1.0 - p, EPS))
    return -(y * lp + (1 - y) * lq)


def study_loss_bruteforce(image_y, image_p, study_y, study_p, w_study, w_image):
    """Normalized study loss evaluated term by term."""
    n = len(image_y)
    pos = sum(image_y)
    l_img = 0.0
    for k in range(n):
        l_img += w_image * pos / n * _term(image_y[k], image_p[k])
    l_study = 0.0
    for j in range(len(study_y)):
        l_study += w_study[j] * _term(study_y[j], study_p[j])
    return (l_img + l_study) / (sum(w_study) + w_image * pos)


def attention_bruteforce(V, w, H, dps=40):
    """Attention weights and bag vector in extended precision."""
    with mpmath.workdps(dps):
        scores = []
        for h in H:
            s = mpmath.mpf(0)
            for r in range(len(w)):
                u = mpmath.fsum(mpmath.mpf(V[r][c]) * mpmath.mpf(h[c]) for c in range(len(h)))
                s += mpmath.mpf(w[r]) * mpmath.tanh(u)
            scores.append(s)
        e = [mpmath.exp(s) for s in scores]
        total = mpmath.fsum(e)
        a = [x / total for x in e]
        bag = [mpmath.fsum(a[k] * mpmath.mpf(H[k][c]) for k in range(len(H))) for c in range(len(H[0]))]
        return [float(x) for x in a], [float(x) for x in bag]


def mann_whitney_auc(labels, scores):
    pos = [s for y, s in zip(labels, scores) if y]
    neg = [s for y, s in zip(labels, scores) if not y]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def rules_satisfied(image_probs, study):
    """Label-consistency rules written out directly; ``study`` maps name -> prob."""
    on = {k: v > 0.5 for k, v in study.items()}
    if max(image_probs) > 0.5:
        return (
            (on["leftsided"] or on["rightsided"] or on["central"])
            and (on["rvlv_gte_1"] != on["rvlv_lt_1"])
            and not (on["chronic"] and on["acute_and_chronic"])
            and not on["negative_for_pe"]
            and not on["indeterminate"]
        )
    return (
        (on["negative_for_pe"] != on["indeterminate"])
        and not any(on[k] for k in ("leftsided", "rightsided", "central", "rvlv_gte_1", "rvlv_lt_1"))
    )
