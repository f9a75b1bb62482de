"""Writes golden_bag.milfb: a 3 x 4 bag whose entry (i, j) is 0.25 * (4 i + j) - 1.5."""
import struct
from pathlib import Path

encoder_id = "randproj-test".encode()
slide_id = "golden-slide-é".encode()
n, d = 3, 4
out = bytearray(b"MILFB1\x00")
out += struct.pack("<IQIB", 1, n, d, 0)
out += struct.pack("<H", len(encoder_id)) + encoder_id
out += struct.pack("<H", len(slide_id)) + slide_id
for i in range(n):
    for j in range(d):
        out += struct.pack("<f", 0.25 * (4 * i + j) - 1.5)
Path(__file__).with_name("golden_bag.milfb").write_bytes(bytes(out))
