"""Collects one verdict line per acceptance criterion for the terminal summary."""

RESULTS = {}


def record(number, passed, detail):
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    RESULTS[number] = line
    print(line)
    return passed
