"""
Tower Field Arithmetic

Composite-field arithmetic for the compact AES S-box:
GF(2^8) = GF(2^4)^2, GF(2^4) = GF(2^2)^2, all in normal bases.

Chosen bases (compact S-box construction):
  GF(2^2): normal basis (W^2, W), N = W^2
  GF(2^4): normal basis (Z^4, Z) over GF(2^2), trace 1, norm N
  GF(2^8): normal basis (Y^16, Y) over GF(2^4), trace 1, norm nu
With these bases the multiplicative identity is the all-ones word at every
level (0b11, 0xF, 0xFF).

Every function is written with bit operators only, so it accepts Python
ints and numpy unsigned integer arrays alike.
"""

from typing import List, Sequence

# Identity elements in the normal bases
GF4_ONE = 0b11
GF16_ONE = 0xF
GF256_ONE = 0xFF


# ============================================
# GF(2^2)
# ============================================

def gf4_sq(x):
    """Square in GF(2^2); also the inverse. A swap of the two coordinates."""
    a = (x >> 1) & 1
    b = x & 1
    return (b << 1) | a


def gf4_mul(x, y):
    """Multiply in GF(2^2), normal basis (W^2, W)."""
    a = (x >> 1) & 1
    b = x & 1
    c = (y >> 1) & 1
    d = y & 1
    e = (a ^ b) & (c ^ d)
    p = (a & c) ^ e
    q = (b & d) ^ e
    return (p << 1) | q


def gf4_scl_N(x):
    """Scale by N = W^2 in GF(2^2)."""
    a = (x >> 1) & 1
    b = x & 1
    p = b
    q = a ^ b
    return (p << 1) | q


def gf4_scl_N2(x):
    """Scale by N^2 = W in GF(2^2)."""
    a = (x >> 1) & 1
    b = x & 1
    p = a ^ b
    q = a
    return (p << 1) | q


# ============================================
# GF(2^4)
# ============================================

def gf16_mul(x, y):
    """Multiply in GF(2^4), normal basis (Z^4, Z)."""
    a = (x >> 2) & 0x3
    b = x & 0x3
    c = (y >> 2) & 0x3
    d = y & 0x3
    e = gf4_scl_N(gf4_mul(a ^ b, c ^ d))
    p = gf4_mul(a, c) ^ e
    q = gf4_mul(b, d) ^ e
    return (p << 2) | q


def gf16_sq_scl(x):
    """Square then scale by nu in GF(2^4)."""
    a = (x >> 2) & 0x3
    b = x & 0x3
    p = gf4_sq(a ^ b)
    q = gf4_scl_N2(gf4_sq(b))
    return (p << 2) | q


def gf16_inv(x):
    """Inverse in GF(2^4); 0 maps to 0."""
    a = (x >> 2) & 0x3
    b = x & 0x3
    c = gf4_scl_N(gf4_sq(a ^ b))
    d = gf4_mul(a, b)
    e = gf4_sq(c ^ d)
    p = gf4_mul(e, b)
    q = gf4_mul(e, a)
    return (p << 2) | q


# ============================================
# GF(2^8)
# ============================================

def gf256_inv(x):
    """Inverse in GF(2^8), input and output in tower basis; 0 maps to 0."""
    a = (x >> 4) & 0xF
    b = x & 0xF
    c = gf16_sq_scl(a ^ b)
    d = gf16_mul(a, b)
    e = gf16_inv(c ^ d)
    p = gf16_mul(e, b)
    q = gf16_mul(e, a)
    return (p << 4) | q


# ============================================
# GF(2) basis changes
# ============================================

class BitMatrix8:
    """
    8x8 matrix over GF(2).

    rows[i] is the linear form producing output bit i: bit j of rows[i]
    selects input bit j.
    """

    __slots__ = ("rows", "_cols")

    def __init__(self, rows: Sequence[int]):
        if len(rows) != 8:
            raise ValueError(f"BitMatrix8 needs 8 rows, got {len(rows)}")
        self.rows = tuple(int(r) & 0xFF for r in rows)
        self._cols = tuple(
            sum(((self.rows[i] >> j) & 1) << i for i in range(8)) for j in range(8)
        )

    @classmethod
    def identity(cls) -> "BitMatrix8":
        return cls([1 << i for i in range(8)])

    @classmethod
    def from_columns(cls, columns: Sequence[int]) -> "BitMatrix8":
        """
        Build from a column array in the compact S-box layout.

        The array is ordered most significant input bit first: input bit j
        maps to columns[7 - j].
        """
        rows = [0] * 8
        for j in range(8):
            col = columns[7 - j]
            for i in range(8):
                rows[i] |= ((col >> i) & 1) << j
        return cls(rows)

    def column(self, j: int) -> int:
        """Image of input bit j."""
        return self._cols[j]

    @property
    def columns(self) -> List[int]:
        """Column array in the compact S-box layout (inverse of from_columns)."""
        return [self.column(7 - k) for k in range(8)]

    def __matmul__(self, other: "BitMatrix8") -> "BitMatrix8":
        """Composition: (self @ other) applies other first."""
        cols = [basis_change(other.column(j), self) for j in range(8)]
        rows = [0] * 8
        for j, col in enumerate(cols):
            for i in range(8):
                rows[i] |= ((col >> i) & 1) << j
        return BitMatrix8(rows)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, BitMatrix8) and self.rows == other.rows

    def __hash__(self) -> int:
        return hash(self.rows)

    def __repr__(self) -> str:
        return f"BitMatrix8([{', '.join(f'0x{r:02X}' for r in self.rows)}])"

    def rank(self) -> int:
        """Rank over GF(2)."""
        rows = list(self.rows)
        rank = 0
        for col in range(8):
            pivot = next((r for r in range(rank, 8) if (rows[r] >> col) & 1), None)
            if pivot is None:
                continue
            rows[rank], rows[pivot] = rows[pivot], rows[rank]
            for r in range(8):
                if r != rank and (rows[r] >> col) & 1:
                    rows[r] ^= rows[rank]
            rank += 1
        return rank

    def determinant(self) -> int:
        """Determinant over GF(2): 1 if invertible, else 0."""
        return 1 if self.rank() == 8 else 0

    def inverse(self) -> "BitMatrix8":
        """Gauss-Jordan elimination on [M | I]."""
        aug = [(self.rows[i], 1 << i) for i in range(8)]
        for col in range(8):
            pivot = next((r for r in range(col, 8) if (aug[r][0] >> col) & 1), None)
            if pivot is None:
                raise ValueError("Matrix not invertible over GF(2)")
            aug[col], aug[pivot] = aug[pivot], aug[col]
            for r in range(8):
                if r != col and (aug[r][0] >> col) & 1:
                    aug[r] = (aug[r][0] ^ aug[col][0], aug[r][1] ^ aug[col][1])
        return BitMatrix8([right for _, right in aug])


def basis_change(x, matrix: BitMatrix8):
    """
    Multiply byte x by a GF(2) matrix: y_i = XOR_j (rows[i]_j AND x_j).

    Accumulates column images, so it vectorises over numpy arrays.
    """
    y = x & 0
    for j in range(8):
        y = y ^ (((x >> j) & 1) * matrix.column(j))
    return y


# Change-of-basis arrays of the compact S-box (MSB input first)
A2X_COLUMNS = [0x98, 0xF3, 0xF2, 0x48, 0x09, 0x81, 0xA9, 0xFF]
X2A_COLUMNS = [0x64, 0x78, 0x6E, 0x8C, 0x68, 0x29, 0xDE, 0x60]
X2S_COLUMNS = [0x58, 0x2D, 0x9E, 0x0B, 0xDC, 0x04, 0x03, 0x24]
S2X_COLUMNS = [0x8C, 0x79, 0x05, 0xEB, 0x12, 0x04, 0x51, 0x53]

# AES polynomial basis -> tower basis
A2X = BitMatrix8.from_columns(A2X_COLUMNS)
# tower basis -> AES polynomial basis
X2A = BitMatrix8.from_columns(X2A_COLUMNS)
# tower basis -> AES basis with the affine matrix folded in
X2S = BitMatrix8.from_columns(X2S_COLUMNS)
# inverse of X2S
S2X = BitMatrix8.from_columns(S2X_COLUMNS)

AFFINE_CONSTANT = 0x63
