"""Shared fixtures and independent oracles (plain loops, no package internals)."""

import math

import numpy as np
import pytest

from movit.vit import ViTConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return ViTConfig(image_size=8, patch_size=4, in_channels=1, embed_dim=12, depth=2, num_heads=3,
                     mlp_ratio=2.0, num_classes=3, movit_layer=1)


def loop_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i][t]) * float(b[t][j])
            out[i][j] = s
    return np.array(out)


def loop_softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    z = sum(e)
    return [v / z for v in e]


def loop_attention(q, k, v):
    """Single-head scaled dot-product attention with explicit loops; q, k, v are [T, d]."""
    T, d = len(q), len(q[0])
    out = np.zeros((T, len(v[0])))
    for i in range(T):
        logits = [sum(q[i][c] * k[j][c] for c in range(d)) / math.sqrt(d) for j in range(len(k))]
        w = loop_softmax(logits)
        for j in range(len(k)):
            for c in range(len(v[0])):
                out[i, c] += w[j] * v[j][c]
    return out


def scalar_ema(old, generated, alphas):
    """Stored value after applying new = a*gen + (1-a)*old for each step, one scalar at a time."""
    x = float(old)
    for g, a in zip(generated, alphas):
        x = a * float(g) + (1.0 - a) * x
    return x


def cosine(u, v):
    return sum(a * b for a, b in zip(u, v)) / (math.sqrt(sum(a * a for a in u)) * math.sqrt(sum(b * b for b in v)))


def loop_mmd(proto, full, cross_coef=2.0):
    P, M = len(proto), len(full)
    s1 = sum(cosine(a, b) for a in proto for b in proto) / P ** 2
    s2 = sum(cosine(a, b) for a in proto for b in full) / (P * M)
    s3 = sum(cosine(a, b) for a in full for b in full) / M ** 2
    return s1 - cross_coef * s2 + s3


def brute_topk(query, keys, k, exclude=-1):
    """Indices sorted by (descending dot product, ascending index)."""
    scored = [(-sum(float(a) * float(b) for a, b in zip(query, key)), j) for j, key in enumerate(keys) if j != exclude]
    scored.sort()
    return [j for _, j in scored[:k]]


def pair_count_auc(scores, positive):
    pos = [s for s, p in zip(scores, positive) if p]
    neg = [s for s, p in zip(scores, positive) if not p]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


# ---------------------------------------------------------------- acceptance reporting

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    number = dict(report.user_properties).get("criterion")
    if number is None:
        return
    number, title = number
    text = dict(report.user_properties).get("detail", "")
    if report.failed:
        text = (text + "; " if text else "") + str(report.longrepr).strip().splitlines()[-1][:200]
    _criteria[number] = (title, "PASS" if report.passed else "SKIP" if report.skipped else "FAIL", text)


@pytest.hookimpl(tryfirst=True)
def pytest_runtest_setup(item):
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        item.user_properties.append(("criterion", tuple(marker.args)))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, outcome, text = _criteria[number]
        terminalreporter.write_line(f"{outcome} criterion {number:2d} {title}: {text}")
