"""Writes py_states.soet with only the standard library.

Run from this directory: python3 write_soet.py
"""
import struct

states = [[0.5, -1.25], [2.0, 3.0], [-0.0, 1e-3]]
tokens = ["Step 1:", " x", " été"]
layer_tag = 7
correct = True

flags = 1 | 2
out = bytearray(b"SOET")
out += struct.pack("<5I", 1, len(states), len(states[0]), layer_tag, flags)
for row in states:
    out += struct.pack(f"<{len(row)}f", *row)
for tok in tokens:
    raw = tok.encode("utf-8")
    out += struct.pack("<I", len(raw)) + raw
out += bytes([1 if correct else 0])

with open("py_states.soet", "wb") as f:
    f.write(out)
