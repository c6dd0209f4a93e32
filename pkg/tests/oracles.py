"""Brute-force reference implementations used only by the tests.

Written directly from the metric definitions with explicit loops and no
shared code with the package, so agreement is meaningful.
"""


def occurs_at(b, gram, p):
    for k in range(len(gram)):
        if b[p + k] != gram[k]:
            return False
    return True


def occurrences(b, gram):
    return [p for p in range(len(b) - len(gram) + 1) if occurs_at(b, gram, p)]


def ovl(a, b, n):
    total = len(a) - n + 1
    if total <= 0:
        return None
    hits = 0
    for i in range(total):
        if occurrences(b, a[i:i + n]):
            hits += 1
    return hits / total


def s_ovl(a, b, span_pairs, n):
    sensitive_pos = []
    for start, length in span_pairs:
        for p in range(start, start + length):
            sensitive_pos.append(p)
    sensitive_ids = [b[p] for p in sensitive_pos]
    total = len(a) - n + 1
    if total <= 0:
        return None
    den = num = 0
    for i in range(total):
        gram = a[i:i + n]
        if not any(tok in sensitive_ids for tok in gram):
            continue
        den += 1
        for p in occurrences(b, gram):
            if any(p <= q < p + n for q in sensitive_pos):
                num += 1
                break
    if den == 0:
        return None
    return num / den


def greedy(next_token, prefix, length):
    out = list(prefix)
    for _ in range(length):
        out.append(next_token(out))
    return out[len(prefix):]


def el(next_token, x, n, cap):
    vals = []
    for t in range(1, len(x) - n + 1):
        length = min(len(x) - t, cap)
        v = ovl(greedy(next_token, x[:t], length), x[t:], n)
        if v is not None:
            vals.append(v)
    return sum(vals) / len(vals) if vals else None


def s_el(next_token, x, span_pairs, n, cap):
    vals = []
    for t in range(1, len(x) - n + 1):
        length = min(len(x) - t, cap)
        shifted = []
        for start, ln in span_pairs:
            a, e = max(start - t, 0), min(start + ln - t, len(x) - t)
            if e > a:
                shifted.append((a, e - a))
        v = s_ovl(greedy(next_token, x[:t], length), x[t:], shifted, n)
        if v is not None:
            vals.append(v)
    return sum(vals) / len(vals) if vals else None


def mem_acc(next_token, x, positions=None):
    if positions is None:
        positions = range(1, len(x))
    positions = list(positions)
    if not positions:
        return None
    return sum(next_token(x[:t]) == x[t] for t in positions) / len(positions)
