"""Independent reference implementations used as test oracles.

Plain Python loops over pixels; nothing here shares code with the package.
"""


def counts(pred, target, threshold=0.5):
    tp = tn = fp = fn = 0
    for p, t in zip(pred, target):
        pos = p >= threshold
        if pos and t:
            tp += 1
        elif pos:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return tp, tn, fp, fn


def _div(a, b):
    return 0.0 if b == 0 else a / b


def count_metrics(pred, target, threshold=0.5):
    tp, tn, fp, fn = counts(pred, target, threshold)
    prec_p, prec_n = _div(tp, tp + fp), _div(tn, tn + fn)
    reca_p, reca_n = _div(tp, tp + fn), _div(tn, tn + fp)
    f1 = [_div(2 * p * r, p + r) for p, r in ((prec_p, reca_p), (prec_n, reca_n))]
    inter = tp
    size = (tp + fp) + (tp + fn)
    return {
        "acc": (tp + tn) / (tp + tn + fp + fn),
        "dice": 1.0 if size == 0 else 2 * inter / size,
        "jacc": 1.0 if size == 0 else inter / (size - inter),
        "prec": (prec_p + prec_n) / 2,
        "reca": (reca_p + reca_n) / 2,
        "f1": (f1[0] + f1[1]) / 2,
        "sens": reca_p,
        "spec": reca_n,
    }


def auc_pairs(pos, neg):
    if not pos or not neg:
        return None
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def mean_std(xs):
    n = len(xs)
    m = sum(xs) / n
    if n == 1:
        return m, 0.0
    return m, (sum((x - m) ** 2 for x in xs) / (n - 1)) ** 0.5
