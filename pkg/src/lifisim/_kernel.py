"""Compiled ray-tracing core.

One serial kernel walks each primary ray's bounce tree depth-first, splitting
every diffuse reflection into nu_s equal-power children and recording detector
strikes.  Per-primary counter-based RNG streams (derived from seed, chip and
ray index) make the output independent of chunking, so results are bit-stable
for a given scene/config/seed.

Rays whose children would all fall below the bounce and intensity limits take
a cheap terminal path: only detector intersections plus an occlusion scan are
evaluated, which is equivalent to the full nearest-hit test for record
purposes (ties at identical distance resolve to the detector, matching
`scene.intersect`).
"""

import numpy as np
from numba import njit

U64_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_C1 = np.uint64(0xD6E8FEB86659FD93)
_C2 = np.uint64(0xCA01F9DDFB4A6C37)

EPS = 1e-6       # cm, self-intersection guard
EDGE_TOL = 1e-7  # polygon containment slack
_INV53 = 1.0 / 9007199254740992.0


@njit(cache=True, inline="always")
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def stream_seed(seed, chip, ray):
    """Stateless stream key for one primary ray."""
    x = np.uint64(seed) + _C1 * np.uint64(chip + 1) + _C2 * np.uint64(ray + 1)
    return _mix64(_mix64(x))


@njit(cache=True, inline="always")
def _next_u01(state):
    state = state + _GAMMA
    z = _mix64(state)
    return state, np.float64(z >> np.uint64(11)) * _INV53


@njit(cache=True)
def fill_stream_seeds(seed, chip, start_ray, out):
    for i in range(out.size):
        out[i] = stream_seed(seed, chip, start_ray + i)


_EMIT_SALT = np.uint64(0x5851F42D4C957F2D)


@njit(cache=True)
def fill_emission_uniforms(seed, chip, start_ray, n1, n2, u1, u2, uw):
    """Per-ray emission uniforms from counter-based streams.

    With a stratification grid (n1 x n2 cells enumerated row-major by ray
    index) the pair (u1, u2) is jittered inside the ray's cell; rays beyond
    the full grid fall back to plain uniforms.  Chunk-size independent.
    """
    base = n1 * n2
    for i in range(u1.size):
        ray = start_ray + i
        state = stream_seed(seed ^ _EMIT_SALT, chip, ray)
        state, a = _next_u01(state)
        state, b = _next_u01(state)
        state, c = _next_u01(state)
        if n1 > 0 and ray < base:
            row = ray // n2
            col = ray - row * n2
            u1[i] = (row + a) / n1
            u2[i] = (col + b) / n2
        else:
            u1[i] = a
            u2[i] = b
        uw[i] = c


@njit(cache=True, inline="always")
def _interp_zero_outside(x, xs, ws, lo, hi):
    """Linear interpolation on knot slice [lo, hi); zero outside the span."""
    if x < xs[lo] or x > xs[hi - 1]:
        return 0.0
    a, b = lo, hi - 1
    while b - a > 1:
        m = (a + b) // 2
        if xs[m] <= x:
            a = m
        else:
            b = m
    x0 = xs[a]
    x1 = xs[a + 1]
    if x1 == x0:
        return ws[a]
    f = (x - x0) / (x1 - x0)
    return ws[a] + f * (ws[a + 1] - ws[a])


@njit(cache=True, inline="always")
def _slab(o, d, lo, hi, tlo, thi):
    if d != 0.0:
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
        if t0 > t1:
            t0, t1 = t1, t0
        if t0 > tlo:
            tlo = t0
        if t1 < thi:
            thi = t1
    elif o < lo or o > hi:
        return 1.0, -1.0
    return tlo, thi


@njit(cache=True, inline="always")
def _aabb_hit(bb, g, ox, oy, oz, dx, dy, dz, tmax):
    tlo, thi = _slab(ox, dx, bb[g, 0], bb[g, 3], EPS, tmax)
    if tlo > thi:
        return False
    tlo, thi = _slab(oy, dy, bb[g, 1], bb[g, 4], tlo, thi)
    if tlo > thi:
        return False
    tlo, thi = _slab(oz, dz, bb[g, 2], bb[g, 5], tlo, thi)
    return tlo <= thi


@njit(cache=True, inline="always")
def _poly_t(i, ox, oy, oz, dx, dy, dz, verts, poly_off, pn, pd, rect_axis, rect_b):
    ax = rect_axis[i]
    if ax >= 0:
        # axis-aligned rectangle: plane coordinate plus two range checks
        if ax == 0:
            o_a, d_a, o1, d1, o2, d2 = ox, dx, oy, dy, oz, dz
        elif ax == 1:
            o_a, d_a, o1, d1, o2, d2 = oy, dy, ox, dx, oz, dz
        else:
            o_a, d_a, o1, d1, o2, d2 = oz, dz, ox, dx, oy, dy
        if -1e-15 < d_a < 1e-15:
            return -1.0
        t = (rect_b[i, 0] - o_a) / d_a
        if t <= EPS:
            return -1.0
        p1 = o1 + t * d1
        if p1 < rect_b[i, 1] - EDGE_TOL or p1 > rect_b[i, 2] + EDGE_TOL:
            return -1.0
        p2 = o2 + t * d2
        if p2 < rect_b[i, 3] - EDGE_TOL or p2 > rect_b[i, 4] + EDGE_TOL:
            return -1.0
        return t
    nx = pn[i, 0]
    ny = pn[i, 1]
    nz = pn[i, 2]
    denom = nx * dx + ny * dy + nz * dz
    if -1e-15 < denom < 1e-15:
        return -1.0
    t = (pd[i] - (nx * ox + ny * oy + nz * oz)) / denom
    if t <= EPS:
        return -1.0
    px = ox + t * dx
    py = oy + t * dy
    pz = oz + t * dz
    s = poly_off[i]
    e = poly_off[i + 1]
    for k in range(s, e):
        k2 = k + 1 if k + 1 < e else s
        ex = verts[k2, 0] - verts[k, 0]
        ey = verts[k2, 1] - verts[k, 1]
        ez = verts[k2, 2] - verts[k, 2]
        rx = px - verts[k, 0]
        ry = py - verts[k, 1]
        rz = pz - verts[k, 2]
        cx = ey * rz - ez * ry
        cy = ez * rx - ex * rz
        cz = ex * ry - ey * rx
        if cx * nx + cy * ny + cz * nz < -EDGE_TOL:
            return -1.0
    return t


@njit(cache=True, inline="always")
def _det_t(j, ox, oy, oz, dx, dy, dz, det_pos, det_u, det_v, det_n, det_hw, det_hh):
    nx = det_n[j, 0]
    ny = det_n[j, 1]
    nz = det_n[j, 2]
    denom = nx * dx + ny * dy + nz * dz
    if -1e-15 < denom < 1e-15:
        return -1.0, 0.0
    pdn = nx * det_pos[j, 0] + ny * det_pos[j, 1] + nz * det_pos[j, 2]
    t = (pdn - (nx * ox + ny * oy + nz * oz)) / denom
    if t <= EPS:
        return -1.0, 0.0
    qx = ox + t * dx - det_pos[j, 0]
    qy = oy + t * dy - det_pos[j, 1]
    qz = oz + t * dz - det_pos[j, 2]
    qu = qx * det_u[j, 0] + qy * det_u[j, 1] + qz * det_u[j, 2]
    if qu > det_hw[j] + EDGE_TOL or qu < -det_hw[j] - EDGE_TOL:
        return -1.0, 0.0
    qv = qx * det_v[j, 0] + qy * det_v[j, 1] + qz * det_v[j, 2]
    if qv > det_hh[j] + EDGE_TOL or qv < -det_hh[j] - EDGE_TOL:
        return -1.0, 0.0
    return t, -denom  # cosine of incidence; positive for front-side hits


@njit(cache=True, inline="always")
def _any_surface_closer(ox, oy, oz, dx, dy, dz, tmax,
                        verts, poly_off, pn, pd, rect_axis, rect_b, group_off, group_bb,
                        super_bb):
    if group_off.size > 2 and not _aabb_hit(super_bb, 0, ox, oy, oz, dx, dy, dz, tmax):
        return False
    for g in range(group_off.size - 1):
        if not _aabb_hit(group_bb, g, ox, oy, oz, dx, dy, dz, tmax):
            continue
        for i in range(group_off[g], group_off[g + 1]):
            t = _poly_t(i, ox, oy, oz, dx, dy, dz, verts, poly_off, pn, pd, rect_axis, rect_b)
            if 0.0 < t < tmax:
                return True
    return False


@njit(cache=True, inline="always")
def _box_exit(ox, oy, oz, dx, dy, dz, box_lo, box_hi):
    """Exit distance and face (0..5: x-,x+,y-,y+,z-,z+) for a ray in the box."""
    best_t = np.inf
    face = -1
    if dx > 0.0:
        t = (box_hi[0] - ox) / dx
        if t < best_t:
            best_t = t
            face = 1
    elif dx < 0.0:
        t = (box_lo[0] - ox) / dx
        if t < best_t:
            best_t = t
            face = 0
    if dy > 0.0:
        t = (box_hi[1] - oy) / dy
        if t < best_t:
            best_t = t
            face = 3
    elif dy < 0.0:
        t = (box_lo[1] - oy) / dy
        if t < best_t:
            best_t = t
            face = 2
    if dz > 0.0:
        t = (box_hi[2] - oz) / dz
        if t < best_t:
            best_t = t
            face = 5
    elif dz < 0.0:
        t = (box_lo[2] - oz) / dz
        if t < best_t:
            best_t = t
            face = 4
    return best_t, face


@njit(cache=True)
def trace_chunk(
    origin, prim_d, prim_wl, prim_pw, prim_stream,
    verts, poly_off, pn, pd, poly_mat, rect_axis, rect_b, group_off, group_bb, super_bb,
    has_box, box_lo, box_hi, box_mat,
    det_single_plane, dp_n, dp_d,
    det_pos, det_u, det_v, det_n, det_hw, det_hh,
    det_ang_m, det_ang_off, det_ang_x, det_ang_w,
    det_spec_off, det_spec_x, det_spec_w,
    mat_off, mat_x, mat_w, max_refl,
    nu_s, kappa_max, min_rel,
    out_det, out_kappa, out_wl, out_t, out_pw,
    gen_power, seg_count,
):
    """Trace one chunk of primary rays; returns hit count or -1 on overflow.

    Rays at the bounce or intensity limit spawn nothing, so they take a cheap
    terminal path: detector tests gated by a coplanarity precheck, plus an
    occlusion scan only for front-side candidates.  seg_count accumulates
    (full nearest-hit segments, terminal segments).
    """
    cap = out_det.size
    n_hit = 0
    n_det = det_hw.size
    n_mat = mat_off.size - 1
    stack_cap = nu_s * (kappa_max + 1) + 4
    st_o = np.empty((stack_cap, 3), dtype=np.float64)
    st_d = np.empty((stack_cap, 3), dtype=np.float64)
    st_pw = np.empty(stack_cap, dtype=np.float64)
    st_rel = np.empty(stack_cap, dtype=np.float64)
    st_len = np.empty(stack_cap, dtype=np.float64)
    st_k = np.empty(stack_cap, dtype=np.int64)
    refl_cache = np.empty(n_mat, dtype=np.float64)
    spec_cache = np.empty(n_det, dtype=np.float64)

    for ip in range(prim_d.shape[0]):
        state = prim_stream[ip]
        wl = prim_wl[ip]
        # material reflectance is fixed per primary (children inherit the
        # wavelength), so evaluate each material curve once
        for m in range(n_mat):
            refl_cache[m] = _interp_zero_outside(wl, mat_x, mat_w, mat_off[m], mat_off[m + 1])
        for j in range(n_det):
            spec_cache[j] = _interp_zero_outside(
                wl, det_spec_x, det_spec_w, det_spec_off[j], det_spec_off[j + 1]
            )

        st_o[0, 0] = origin[0]
        st_o[0, 1] = origin[1]
        st_o[0, 2] = origin[2]
        st_d[0, 0] = prim_d[ip, 0]
        st_d[0, 1] = prim_d[ip, 1]
        st_d[0, 2] = prim_d[ip, 2]
        st_pw[0] = prim_pw[ip]
        st_rel[0] = 1.0
        st_len[0] = 0.0
        st_k[0] = 0
        top = 1

        while top > 0:
            top -= 1
            ox = st_o[top, 0]
            oy = st_o[top, 1]
            oz = st_o[top, 2]
            dx = st_d[top, 0]
            dy = st_d[top, 1]
            dz = st_d[top, 2]
            pw = st_pw[top]
            rel = st_rel[top]
            plen = st_len[top]
            kap = st_k[top]

            can_spawn = kap < kappa_max and rel * max_refl / nu_s > min_rel

            if not can_spawn:
                seg_count[1] += 1
                # terminal ray: only an unoccluded front-side strike matters
                if det_single_plane:
                    # all detectors are coplanar: one front-crossing test
                    if dp_n[0] * ox + dp_n[1] * oy + dp_n[2] * oz <= dp_d:
                        continue
                    if dp_n[0] * dx + dp_n[1] * dy + dp_n[2] * dz >= 0.0:
                        continue
                best_t = np.inf
                best_j = -1
                best_cos = 0.0
                for j in range(n_det):
                    t, cosi = _det_t(j, ox, oy, oz, dx, dy, dz,
                                     det_pos, det_u, det_v, det_n, det_hw, det_hh)
                    if t > 0.0 and t < best_t:
                        best_t = t
                        best_j = j
                        best_cos = cosi
                if best_j < 0:
                    continue
                if best_cos <= 0.0:
                    continue  # back-side strike: absorbed either way, not sensed
                if has_box:
                    t_wall, _ = _box_exit(ox, oy, oz, dx, dy, dz, box_lo, box_hi)
                    if EPS < t_wall < best_t:
                        continue
                if _any_surface_closer(ox, oy, oz, dx, dy, dz, best_t,
                                       verts, poly_off, pn, pd, rect_axis, rect_b,
                                       group_off, group_bb, super_bb):
                    continue
                if n_hit >= cap:
                    return -1
                ang = _det_angular(best_j, best_cos, det_ang_m, det_ang_off, det_ang_x, det_ang_w)
                out_det[n_hit] = best_j
                out_kappa[n_hit] = kap
                out_wl[n_hit] = wl
                out_t[n_hit] = plen + best_t
                out_pw[n_hit] = pw * ang * spec_cache[best_j]
                n_hit += 1
                continue

            # full nearest-hit over the box shell, surfaces and detectors
            seg_count[0] += 1
            best_t = np.inf
            best_kind = -1  # 0 polygon, 1 detector, 2 box face
            best_idx = -1
            best_cos = 0.0
            if has_box:
                t_wall, face = _box_exit(ox, oy, oz, dx, dy, dz, box_lo, box_hi)
                if face >= 0 and t_wall > EPS:
                    best_t = t_wall
                    best_kind = 2
                    best_idx = face
            if group_off.size <= 2 or _aabb_hit(super_bb, 0, ox, oy, oz, dx, dy, dz, best_t):
                for g in range(group_off.size - 1):
                    if not _aabb_hit(group_bb, g, ox, oy, oz, dx, dy, dz, best_t):
                        continue
                    for i in range(group_off[g], group_off[g + 1]):
                        t = _poly_t(i, ox, oy, oz, dx, dy, dz, verts, poly_off, pn, pd,
                                    rect_axis, rect_b)
                        if t > 0.0 and t < best_t:
                            best_t = t
                            best_kind = 0
                            best_idx = i
            test_dets = True
            if det_single_plane:
                # coplanar detectors: a single plane crossing gates both sides
                denom_p = dp_n[0] * dx + dp_n[1] * dy + dp_n[2] * dz
                if denom_p == 0.0:
                    test_dets = False
                else:
                    t_p = (dp_d - (dp_n[0] * ox + dp_n[1] * oy + dp_n[2] * oz)) / denom_p
                    if t_p <= EPS or t_p >= best_t:
                        test_dets = False
            if test_dets:
                for j in range(n_det):
                    t, cosi = _det_t(j, ox, oy, oz, dx, dy, dz,
                                     det_pos, det_u, det_v, det_n, det_hw, det_hh)
                    if t > 0.0 and (t < best_t or (t == best_t and best_kind != 1)):
                        best_t = t
                        best_kind = 1
                        best_idx = j
                        best_cos = cosi

            if best_kind < 0:
                continue  # escaped through a numeric crack

            if best_kind == 1:
                if best_cos <= 0.0:
                    continue
                if n_hit >= cap:
                    return -1
                ang = _det_angular(best_idx, best_cos, det_ang_m, det_ang_off, det_ang_x, det_ang_w)
                out_det[n_hit] = best_idx
                out_kappa[n_hit] = kap
                out_wl[n_hit] = wl
                out_t[n_hit] = plen + best_t
                out_pw[n_hit] = pw * ang * spec_cache[best_idx]
                n_hit += 1
                continue

            # diffuse bounce: split into nu_s cosine-distributed children
            if best_kind == 2:
                refl = refl_cache[box_mat[best_idx]]
            else:
                refl = refl_cache[poly_mat[best_idx]]
            child_pw = pw * refl / nu_s
            child_rel = rel * refl / nu_s
            if child_rel <= min_rel:
                continue
            hx = ox + best_t * dx
            hy = oy + best_t * dy
            hz = oz + best_t * dz
            if best_kind == 2:
                # inward unit normal of the struck box face
                nx = 1.0 if best_idx == 0 else (-1.0 if best_idx == 1 else 0.0)
                ny = 1.0 if best_idx == 2 else (-1.0 if best_idx == 3 else 0.0)
                nz = 1.0 if best_idx == 4 else (-1.0 if best_idx == 5 else 0.0)
            else:
                nx = pn[best_idx, 0]
                ny = pn[best_idx, 1]
                nz = pn[best_idx, 2]
                if nx * dx + ny * dy + nz * dz > 0.0:
                    nx = -nx
                    ny = -ny
                    nz = -nz
            # orthonormal tangent frame about the shading normal
            if nz > 0.9 or nz < -0.9:
                hxv, hyv, hzv = 1.0, 0.0, 0.0
            else:
                hxv, hyv, hzv = 0.0, 0.0, 1.0
            t1x = ny * hzv - nz * hyv
            t1y = nz * hxv - nx * hzv
            t1z = nx * hyv - ny * hxv
            inv = 1.0 / np.sqrt(t1x * t1x + t1y * t1y + t1z * t1z)
            t1x *= inv
            t1y *= inv
            t1z *= inv
            t2x = ny * t1z - nz * t1y
            t2y = nz * t1x - nx * t1z
            t2z = nx * t1y - ny * t1x
            new_len = plen + best_t
            child_k = kap + 1
            gen_power[child_k] += pw * refl  # total power handed to this spawn
            for _c in range(nu_s):
                state, u1 = _next_u01(state)
                state, u2 = _next_u01(state)
                r = np.sqrt(u1)
                phi = 6.283185307179586 * u2
                lx = r * np.cos(phi)
                ly = r * np.sin(phi)
                lz = np.sqrt(1.0 - u1)
                cdx = lx * t1x + ly * t2x + lz * nx
                cdy = lx * t1y + ly * t2y + lz * ny
                cdz = lx * t1z + ly * t2z + lz * nz
                st_o[top, 0] = hx
                st_o[top, 1] = hy
                st_o[top, 2] = hz
                st_d[top, 0] = cdx
                st_d[top, 1] = cdy
                st_d[top, 2] = cdz
                st_pw[top] = child_pw
                st_rel[top] = child_rel
                st_len[top] = new_len
                st_k[top] = child_k
                top += 1
    return n_hit


@njit(cache=True, inline="always")
def _det_angular(j, cos_inc, det_ang_m, det_ang_off, det_ang_x, det_ang_w):
    if cos_inc > 1.0:
        cos_inc = 1.0
    m = det_ang_m[j]
    if m >= 0.0:
        return cos_inc ** m
    theta = np.degrees(np.arccos(cos_inc))
    lo = det_ang_off[j]
    hi = det_ang_off[j + 1]
    if theta > det_ang_x[hi - 1]:
        return 0.0
    if theta <= det_ang_x[lo]:
        return det_ang_w[lo]
    return _interp_zero_outside(theta, det_ang_x, det_ang_w, lo, hi)
