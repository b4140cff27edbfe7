"""secp256k1 curve arithmetic and recoverable ECDSA.

Points are handled in Jacobian coordinates internally and exposed as affine
``(x, y)`` integer tuples. ``None`` stands for the point at infinity.
"""

from __future__ import annotations

import hashlib
import hmac

P = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEFFFFFC2F
N = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141
GX = 0x79BE667EF9DCBBAC55A06295CE870B07029BFCDB2DCE28D959F2815B16F81798
GY = 0x483ADA7726A3C4655DA4FBFC0E1108A8FD17B448A68554199C47D08FFB10D4B8
G = (GX, GY)
HALF_N = N // 2

Point = tuple[int, int]
_Jac = tuple[int, int, int]
_INF: _Jac = (1, 1, 0)


def is_on_curve(point: Point | None) -> bool:
    if point is None:
        return False
    x, y = point
    if not (0 <= x < P and 0 <= y < P):
        return False
    return (y * y - x * x * x - 7) % P == 0


def _double(p: _Jac) -> _Jac:
    x, y, z = p
    if z == 0 or y == 0:
        return _INF
    yy = y * y % P
    s = 4 * x * yy % P
    m = 3 * x * x % P
    x3 = (m * m - 2 * s) % P
    y3 = (m * (s - x3) - 8 * yy * yy) % P
    z3 = 2 * y * z % P
    return (x3, y3, z3)


def _add_affine(p: _Jac, x2: int, y2: int) -> _Jac:
    x1, y1, z1 = p
    if z1 == 0:
        return (x2, y2, 1)
    zz = z1 * z1 % P
    u2 = x2 * zz % P
    s2 = y2 * z1 * zz % P
    h = (u2 - x1) % P
    r = (s2 - y1) % P
    if h == 0:
        if r == 0:
            return _double(p)
        return _INF
    hh = h * h % P
    hhh = h * hh % P
    v = x1 * hh % P
    x3 = (r * r - hhh - 2 * v) % P
    y3 = (r * (v - x3) - y1 * hhh) % P
    z3 = z1 * h % P
    return (x3, y3, z3)


def _add(p: _Jac, q: _Jac) -> _Jac:
    if q[2] == 0:
        return p
    if p[2] == 0:
        return q
    x1, y1, z1 = p
    x2, y2, z2 = q
    z1z1 = z1 * z1 % P
    z2z2 = z2 * z2 % P
    u1 = x1 * z2z2 % P
    u2 = x2 * z1z1 % P
    s1 = y1 * z2 * z2z2 % P
    s2 = y2 * z1 * z1z1 % P
    h = (u2 - u1) % P
    r = (s2 - s1) % P
    if h == 0:
        if r == 0:
            return _double(p)
        return _INF
    hh = h * h % P
    hhh = h * hh % P
    v = u1 * hh % P
    x3 = (r * r - hhh - 2 * v) % P
    y3 = (r * (v - x3) - s1 * hhh) % P
    z3 = z1 * z2 * h % P
    return (x3, y3, z3)


def _to_affine(p: _Jac) -> Point | None:
    x, y, z = p
    if z == 0:
        return None
    zinv = pow(z, -1, P)
    zinv2 = zinv * zinv % P
    return (x * zinv2 % P, y * zinv2 * zinv % P)


# fixed-base table: _G_TABLE[i][j] = j * 256**i * G, affine
_G_TABLE: list[list[Point | None]] | None = None


def _g_table() -> list[list[Point | None]]:
    global _G_TABLE
    if _G_TABLE is None:
        table = []
        base: _Jac = (GX, GY, 1)
        for _ in range(32):
            row: list[Point | None] = [None]
            bx, by = _to_affine(base)
            acc = _INF
            for _ in range(255):
                acc = _add_affine(acc, bx, by)
                row.append(_to_affine(acc))
            table.append(row)
            for _ in range(8):
                base = _double(base)
        _G_TABLE = table
    return _G_TABLE


def _mul_g_jac(k: int) -> _Jac:
    table = _g_table()
    acc = _INF
    i = 0
    while k:
        byte = k & 0xFF
        if byte:
            x, y = table[i][byte]
            acc = _add_affine(acc, x, y)
        k >>= 8
        i += 1
    return acc


def _wnaf(k: int, width: int = 5) -> list[int]:
    digits = []
    half = 1 << (width - 1)
    full = 1 << width
    while k:
        if k & 1:
            d = k % full
            if d >= half:
                d -= full
            k -= d
        else:
            d = 0
        digits.append(d)
        k >>= 1
    return digits


def _mul_jac(k: int, point: Point) -> _Jac:
    x, y = point
    # odd multiples P, 3P, ..., 15P
    twice = _double((x, y, 1))
    odd: list[_Jac] = [(x, y, 1)]
    for _ in range(7):
        odd.append(_add(odd[-1], twice))
    odd_aff = [_to_affine(p) for p in odd]
    acc = _INF
    for d in reversed(_wnaf(k)):
        acc = _double(acc)
        if d > 0:
            px, py = odd_aff[d >> 1]
            acc = _add_affine(acc, px, py)
        elif d < 0:
            px, py = odd_aff[(-d) >> 1]
            acc = _add_affine(acc, px, P - py)
    return acc


def mul_g(k: int) -> Point | None:
    """k * G."""
    return _to_affine(_mul_g_jac(k % N))


def mul(k: int, point: Point) -> Point | None:
    """k * point for an affine on-curve point."""
    k %= N
    if k == 0:
        return None
    return _to_affine(_mul_jac(k, point))


def add(p: Point | None, q: Point | None) -> Point | None:
    if p is None:
        return q
    if q is None:
        return p
    return _to_affine(_add_affine((p[0], p[1], 1), q[0], q[1]))


def lift_x(x: int, odd: bool) -> Point | None:
    """Return the curve point with abscissa ``x`` and the requested y parity."""
    if not 0 <= x < P:
        return None
    rhs = (pow(x, 3, P) + 7) % P
    y = pow(rhs, (P + 1) // 4, P)
    if y * y % P != rhs:
        return None
    if (y & 1) != odd:
        y = P - y
    return (x, y)


def rfc6979_nonce(secret: int, digest: bytes) -> int:
    """Deterministic nonce per RFC 6979 with HMAC-SHA256 (first candidate in range)."""
    x = secret.to_bytes(32, "big")
    h1 = (int.from_bytes(digest, "big") % N).to_bytes(32, "big")
    v = b"\x01" * 32
    k = b"\x00" * 32
    k = hmac.new(k, v + b"\x00" + x + h1, hashlib.sha256).digest()
    v = hmac.new(k, v, hashlib.sha256).digest()
    k = hmac.new(k, v + b"\x01" + x + h1, hashlib.sha256).digest()
    v = hmac.new(k, v, hashlib.sha256).digest()
    while True:
        v = hmac.new(k, v, hashlib.sha256).digest()
        candidate = int.from_bytes(v, "big")
        if 1 <= candidate < N:
            return candidate
        k = hmac.new(k, v + b"\x00", hashlib.sha256).digest()
        v = hmac.new(k, v, hashlib.sha256).digest()


def ecdsa_sign(digest: bytes, secret: int) -> tuple[int, int, int]:
    """Sign a 32-byte digest; returns ``(r, s, recid)`` with low-s normalization."""
    z = int.from_bytes(digest, "big") % N
    k = rfc6979_nonce(secret, digest)
    while True:
        kg = mul_g(k)
        r = kg[0] % N
        if r == 0:
            k = (k + 1) % N or 1
            continue
        s = pow(k, -1, N) * (z + r * secret) % N
        if s == 0:
            k = (k + 1) % N or 1
            continue
        recid = (kg[1] & 1) | (2 if kg[0] >= N else 0)
        if s > HALF_N:
            s = N - s
            recid ^= 1
        return r, s, recid


def ecdsa_recover(digest: bytes, r: int, s: int, recid: int) -> Point | None:
    """Recover the signing public key, or ``None`` if no valid key exists."""
    if not (1 <= r < N and 1 <= s < N) or recid not in (0, 1, 2, 3):
        return None
    x = r + N if recid & 2 else r
    big_r = lift_x(x, bool(recid & 1))
    if big_r is None:
        return None
    z = int.from_bytes(digest, "big") % N
    rinv = pow(r, -1, N)
    u1 = (-z * rinv) % N
    u2 = s * rinv % N
    q = _add(_mul_g_jac(u1), _mul_jac(u2, big_r))
    return _to_affine(q)


def ecdsa_verify(digest: bytes, r: int, s: int, pub: Point) -> bool:
    if not (1 <= r < N and 1 <= s < N) or not is_on_curve(pub):
        return False
    z = int.from_bytes(digest, "big") % N
    sinv = pow(s, -1, N)
    q = _to_affine(_add(_mul_g_jac(z * sinv % N), _mul_jac(r * sinv % N, pub)))
    return q is not None and q[0] % N == r
