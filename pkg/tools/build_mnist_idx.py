#!/usr/bin/env python3
"""Place the MNIST IDX files under ``data/mnist`` (gzipped, standard names).

The npm package ``mnist-data`` (1.2.6) redistributes the four original IDX
files unchanged, which makes it reachable through an npm registry mirror when
the upstream MNIST hosts are not:

    python tools/build_mnist_idx.py --out data/mnist
    python tools/build_mnist_idx.py --tarball mnist-data-1.2.6.tgz
"""

from __future__ import annotations

import argparse
import gzip
import hashlib
import subprocess
import tarfile
import tempfile
from pathlib import Path

# md5 of the uncompressed upstream files
EXPECTED_MD5 = {
    "train-images-idx3-ubyte": "6bbc9ace898e44ae57da46a324031adb",
    "train-labels-idx1-ubyte": "a25bea736e30d166cdddb491f175f624",
    "t10k-images-idx3-ubyte": "2646ac647ad5339dbf082846283269ea",
    "t10k-labels-idx1-ubyte": "27ae3e4e09519cfbb04c329615203637",
}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path("data/mnist"))
    ap.add_argument("--tarball", type=Path, help="mnist-data-1.2.6.tgz (fetched with `npm pack` if omitted)")
    args = ap.parse_args(argv)

    args.out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        tarball = args.tarball
        if tarball is None:
            subprocess.run(["npm", "pack", "mnist-data@1.2.6"], cwd=tmp, check=True, stdout=subprocess.DEVNULL)
            tarball = Path(tmp) / "mnist-data-1.2.6.tgz"
        with tarfile.open(tarball) as tar:
            for name, md5 in EXPECTED_MD5.items():
                raw = tar.extractfile(f"package/data/{name}").read()
                got = hashlib.md5(raw).hexdigest()
                if got != md5:
                    raise SystemExit(f"{name}: md5 {got} does not match {md5}")
                (args.out / f"{name}.gz").write_bytes(gzip.compress(raw, mtime=0))
                print(f"wrote {args.out / name}.gz ({len(raw)} bytes uncompressed)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
