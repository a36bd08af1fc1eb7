"""Stand-in voice converter obeying the adapter's command contract.

    python -m vcbackdoor.mockvc MODE SOURCE TARGET OUTPUT

Modes: ``copy`` (source unchanged), ``resample`` (source at 22.05 kHz),
``fail`` (exit 3 with a message on stderr), ``sleep`` (hang for a minute),
``shift`` (the surrogate identity shift, a cheap "speaker change").
Each successful call appends a line to ``$MOCKVC_LOG`` when that is set.
"""

from __future__ import annotations

import os
import sys
import time

from .data import read_wav, write_wav
from .dsp import resample
from .triggers import surrogate_identity_shift

SHIFT = {"ratio": 1.2, "band_weights": [0.5, 0.5, 3.0, 3.0]}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 4:
        print(__doc__, file=sys.stderr)
        return 2
    mode, source, target, output = argv
    if mode == "fail":
        print("mockvc: simulated conversion failure", file=sys.stderr)
        return 3
    if mode == "sleep":
        time.sleep(60)
        return 0
    wav, sr = read_wav(source)
    read_wav(target)
    if mode == "copy":
        write_wav(output, wav, sr)
    elif mode == "resample":
        write_wav(output, resample(wav, sr, 22050), 22050)
    elif mode == "shift":
        write_wav(output, surrogate_identity_shift(wav, SHIFT, sample_rate=sr), sr)
    else:
        print(f"mockvc: unknown mode {mode!r}", file=sys.stderr)
        return 2
    if os.environ.get("MOCKVC_LOG"):
        with open(os.environ["MOCKVC_LOG"], "a") as fh:
            fh.write(f"{mode} {source}\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
