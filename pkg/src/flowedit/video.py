"""Video editing: optimize fields on the first frame, then carry them to
every other frame through per-frame homographies estimated from tracked
facial landmarks (ingested from file; tracking itself is out of scope).

Per-frame propagation is a fixed-cost resampling, independent of the
optimization, which is what makes the video path real-time capable.
"""

import numpy as np

from . import _kernels, optimize, warp
from . import tensor as T


def _normalization_transform(pts):
    """Hartley normalization: centroid to origin, mean distance sqrt(2)."""
    centroid = pts.mean(axis=0)
    dist = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    scale = np.sqrt(2.0) / max(dist, 1e-12)
    t = np.array(
        [[scale, 0, -scale * centroid[0]],
         [0, scale, -scale * centroid[1]],
         [0, 0, 1]],
        dtype=np.float64,
    )
    return t


def estimate_homography(src, dst):
    """Least-squares homography mapping src points onto dst (normalized DLT).

    Needs N >= 4 non-degenerate correspondences; returns a 3x3 matrix scaled
    so H[2,2] = 1.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValueError(
            f"point sets must both be (N,2), got {src.shape} and {dst.shape}"
        )
    n = src.shape[0]
    if n < 4:
        raise ValueError(f"homography estimation needs >= 4 points, got {n}")

    t_src = _normalization_transform(src)
    t_dst = _normalization_transform(dst)
    sh = np.column_stack([src, np.ones(n)]) @ t_src.T
    dh = np.column_stack([dst, np.ones(n)]) @ t_dst.T

    a = np.zeros((2 * n, 9), dtype=np.float64)
    for i in range(n):
        x, y = sh[i, 0], sh[i, 1]
        u, v = dh[i, 0], dh[i, 1]
        a[2 * i] = [-x, -y, -1, 0, 0, 0, u * x, u * y, u]
        a[2 * i + 1] = [0, 0, 0, -x, -y, -1, v * x, v * y, v]

    _, s, vt = np.linalg.svd(a)
    # rank < 8 means the solution is not unique (e.g. collinear points)
    if s[7] < 1e-9 * s[0]:
        raise ValueError("degenerate point configuration (rank-deficient system)")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ hn @ t_src
    if abs(h[2, 2]) < 1e-12:
        raise ValueError("homography has vanishing scale component")
    h = h / h[2, 2]
    if abs(np.linalg.det(h)) < 1e-9:
        raise ValueError("estimated homography is singular")
    return h


def apply_homography(h, pts):
    pts = np.asarray(pts, dtype=np.float64)
    ph = np.column_stack([pts, np.ones(len(pts))]) @ h.T
    return ph[:, :2] / ph[:, 2:3]


def homography_jacobian(h, pts):
    """2x2 Jacobian of the projective map at each point (N,2) -> (N,2,2)."""
    pts = np.asarray(pts, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    d = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    nx = h[0, 0] * x + h[0, 1] * y + h[0, 2]
    ny = h[1, 0] * x + h[1, 1] * y + h[1, 2]
    j = np.empty((len(pts), 2, 2), dtype=np.float64)
    j[:, 0, 0] = (h[0, 0] * d - nx * h[2, 0]) / d**2
    j[:, 0, 1] = (h[0, 1] * d - nx * h[2, 1]) / d**2
    j[:, 1, 0] = (h[1, 0] * d - ny * h[2, 0]) / d**2
    j[:, 1, 1] = (h[1, 1] * d - ny * h[2, 1]) / d**2
    return j


def propagate_flow(flow0, cflow0, h):
    """Carry first-frame fields to frame k through homography H (frame0->k).

    The frame-k field at pixel p samples the frame-0 field at q = H^-1(p);
    the sampled displacement vector is mapped through the local Jacobian of H
    at q so the edit scales/rotates with the face. The color field is scalar
    per pixel, so it is sampled without transformation.
    """
    flow0 = np.asarray(flow0, dtype=np.float32)
    cflow0 = np.asarray(cflow0, dtype=np.float32)
    hgt, wid = flow0.shape[:2]
    if abs(np.linalg.det(h)) < 1e-9:
        raise ValueError("cannot propagate through a singular homography")
    hinv = np.linalg.inv(h)

    grid = warp.identity_grid(hgt, wid, np.float64).reshape(-1, 2)
    q = apply_homography(hinv, grid)
    coords = q.reshape(hgt, wid, 2).astype(np.float32)

    sampled = _kernels.grid_sample_forward(flow0, coords)
    jac = homography_jacobian(h, q)
    vecs = np.einsum("nij,nj->ni", jac, sampled.reshape(-1, 2).astype(np.float64))
    flow_k = vecs.reshape(hgt, wid, 2).astype(np.float32)

    cflow_k = _kernels.grid_sample_forward(cflow0, coords)
    return flow_k, cflow_k


def load_landmarks_csv(path):
    """Landmark track: one row per frame, columns x0,y0,x1,y1,... (N >= 4)."""
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            values = [float(v) for v in line.split(",")]
            if len(values) % 2:
                raise ValueError(f"{path}:{lineno}: odd number of landmark values")
            rows.append(np.asarray(values, dtype=np.float64).reshape(-1, 2))
    if not rows:
        raise ValueError(f"{path}: no landmark rows")
    n = rows[0].shape[0]
    if any(r.shape[0] != n for r in rows):
        raise ValueError(f"{path}: inconsistent landmark count across frames")
    return np.stack(rows)


def edit_video(frames, landmarks, prompt, config):
    """Edit a frame sequence: optimize on frame 0, propagate to the rest.

    ``landmarks`` is (F, N, 2) with point identities consistent across
    frames. Returns (edited frames list, EditResult of frame 0).
    """
    frames = [np.asarray(f, dtype=np.float32) for f in frames]
    if len(frames) == 0:
        raise ValueError("empty frame sequence")
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if landmarks.shape[0] != len(frames):
        raise ValueError(
            f"{landmarks.shape[0]} landmark rows for {len(frames)} frames"
        )

    if config.mode == "explicit":
        result = optimize.run_iterative_explicit(frames[0], prompt, config)
    else:
        result = optimize.run_iterative_inr(frames[0], prompt, config)

    edited = [result.edited]
    for k in range(1, len(frames)):
        h = estimate_homography(landmarks[0], landmarks[k])
        flow_k, cflow_k = propagate_flow(result.flow, result.cflow, h)
        with T.no_grad():
            frame_out = warp.warp_full(frames[k], flow_k, cflow_k)
        edited.append(frame_out.data)
    return edited, result
