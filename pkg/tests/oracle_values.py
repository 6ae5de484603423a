"""Values frozen from independent oracle runs (see scripts/roundtrip_oracle.py).

Round-trip MCD through extract, invert, Griffin-Lim (60 iterations), 16-bit WAV
and re-extract: max over speech_like_audio seeds 0-9 times 1.2, rounded up to
0.1. Two unrelated test signals score at least 33.3 (13@100) and 109.0 (128@32).
"""

ROUNDTRIP_MCD_THRESHOLD_13 = 5.4     # observed max 4.45
ROUNDTRIP_MCD_THRESHOLD_128 = 47.0   # observed max 39.10
