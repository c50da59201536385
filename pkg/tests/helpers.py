"""Shared test utilities: execution traces and AEX schedules aimed between two checks."""
from __future__ import annotations

from enclave_pcc import templates as T
from enclave_pcc.consumer import admit
from enclave_pcc.emulator import Emulator


def trace(bundle, data, layout, step_limit=200_000, aex_schedule=()):
    """(image, [(step, rip)], emulator) for a run that stops at the first halt, fault or limit."""
    img, report = admit(bundle, layout)
    assert report.accepted, report.to_text()
    em = Emulator(img, data, aex_schedule, step_limit, None, report.trusted_ranges(img.base))
    rips = []
    while em.state.steps < step_limit:
        rips.append((em.state.steps, em.state.rip))
        try:
            em.step()
        except Exception:
            break
    return img, rips, em


def check_windows(bundle, data, layout):
    """Step windows [after check i returns, entry of check i+1] in which AEXes count toward check i+1."""
    img, rips, _ = trace(bundle, data, layout)
    start = img.symbols[T.SSA_CHECK]
    end = img.symbols[T.EXIT_LABEL] if img.symbols[T.EXIT_LABEL] > start else img.base + len(img.code)
    inside = [start <= rip < end for _, rip in rips]
    entries = [i for i, (_, rip) in enumerate(rips) if rip == start]
    windows = []
    for a, b in zip(entries, entries[1:]):
        back = next(i for i in range(a + 1, b + 1) if not inside[i])
        windows.append((rips[back][0], rips[b][0]))
    return windows


def spread(window, n):
    """``n`` AEX step indices spread round-robin over ``window``."""
    lo, hi = window
    steps = list(range(lo, hi + 1))
    return [steps[i % len(steps)] for i in range(n)]


def widest_window(bundle, data, layout):
    return max(check_windows(bundle, data, layout), key=lambda w: w[1] - w[0])
