#!/usr/bin/env python3
"""Regenerates the shipped track CSVs (s,x,y,w_left,w_right).

Tracks are built from (length, curvature) segments, integrated with a fine
step and resampled at ~1 m spacing. Both circuits run counter-clockwise.
"""
import math


def integrate(segments, step=0.001):
    x = y = h = 0.0
    pts = [(0.0, x, y)]
    s = 0.0
    for length, kappa in segments:
        n = max(1, int(round(length / step)))
        ds = length / n
        for _ in range(n):
            # midpoint heading keeps arcs exact to O(ds^2)
            hm = h + 0.5 * kappa * ds
            x += math.cos(hm) * ds
            y += math.sin(hm) * ds
            h += kappa * ds
            s += ds
            pts.append((s, x, y))
    return pts, (x, y, h)


def resample(pts, spacing):
    total = pts[-1][0]
    n = int(round(total / spacing))
    ds = total / n
    out = []
    j = 0
    for i in range(n):
        s = i * ds
        while pts[j + 1][0] < s:
            j += 1
        s0, x0, y0 = pts[j]
        s1, x1, y1 = pts[j + 1]
        t = 0.0 if s1 == s0 else (s - s0) / (s1 - s0)
        out.append((s, x0 + t * (x1 - x0), y0 + t * (y1 - y0)))
    return out, total


def write(path, samples, w_left, w_right):
    with open(path, "w") as f:
        f.write("s,x,y,w_left,w_right\n")
        for s, x, y in samples:
            f.write(f"{s:.4f},{x:.4f},{y:.4f},{w_left:.2f},{w_right:.2f}\n")


def oval():
    r = 20.0
    straight = (200.0 - 2 * math.pi * r) / 2
    segs = [(straight, 0.0), (math.pi * r, 1 / r), (straight, 0.0), (math.pi * r, 1 / r)]
    pts, end = integrate(segs)
    assert math.hypot(end[0], end[1]) < 1e-3, end
    return resample(pts, 1.0)


def chicane():
    r = 25.0
    rc = 30.0
    a = 0.35
    arc = rc * a
    chic = [(arc, 1 / rc), (arc, -1 / rc), (arc, -1 / rc), (arc, 1 / rc)]
    _, (fx, fy, fh) = integrate(chic)
    assert abs(fy) < 1e-6 and abs(fh) < 1e-9, (fy, fh)
    a1, a2 = 50.0, 50.0
    back = a1 + a2 + fx
    segs = [(a1, 0.0)] + chic + [(a2, 0.0), (math.pi * r, 1 / r), (back, 0.0), (math.pi * r, 1 / r)]
    pts, end = integrate(segs)
    assert math.hypot(end[0], end[1]) < 1e-3, end
    return resample(pts, 1.0)


if __name__ == "__main__":
    import os

    here = os.path.dirname(os.path.abspath(__file__))
    samples, total = oval()
    write(os.path.join(here, "oval.csv"), samples, 3.0, 3.0)
    print("oval", len(samples), round(total, 3))
    samples, total = chicane()
    write(os.path.join(here, "chicane.csv"), samples, 4.0, 4.0)
    print("chicane", len(samples), round(total, 3))
