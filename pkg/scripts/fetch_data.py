"""Download dataset files into ``data/<name>/`` and verify their checksums.

MNIST is fetched from the public mirrors (gzipped IDX) and, failing that,
from the ``mnist-data`` npm package, which ships the raw IDX files.  The
decompressed files are checked against known SHA-256 digests.  For
Fashion-MNIST and CIFAR-10 the digests of the first successful download are
written to ``data/<name>/SHA256SUMS`` and verified on later runs.
"""

from __future__ import annotations

import argparse
import gzip
import hashlib
import io
import json
import sys
import tarfile
import urllib.request
from pathlib import Path

MNIST_SHA256 = {
    "train-images-idx3-ubyte": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "train-labels-idx1-ubyte": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "t10k-images-idx3-ubyte": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "t10k-labels-idx1-ubyte": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}
MNIST_MIRRORS = [
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
]
FASHION_MIRROR = "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/"
CIFAR_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
NPM_REGISTRY = "https://registry.npmjs.org/"


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def get(url: str, timeout: float = 60.0) -> bytes:
    with urllib.request.urlopen(url, timeout=timeout) as resp:
        return resp.read()


def fetch_idx_set(base_urls, names) -> dict:
    for base in base_urls:
        try:
            return {n: gzip.decompress(get(base + n + ".gz")) for n in names}
        except Exception as exc:  # try the next mirror
            print(f"  {base}: {exc}", file=sys.stderr)
    return {}


def fetch_mnist_npm() -> dict:
    meta = json.loads(get(NPM_REGISTRY + "mnist-data/latest"))
    tar = tarfile.open(fileobj=io.BytesIO(get(meta["dist"]["tarball"])), mode="r:gz")
    out = {}
    for member in tar.getmembers():
        name = Path(member.name).name
        if name in MNIST_SHA256:
            out[name] = tar.extractfile(member).read()
    return out


def write_verified(dest: Path, files: dict, expected: dict):
    dest.mkdir(parents=True, exist_ok=True)
    for name, data in files.items():
        digest = sha256(data)
        if name in expected and expected[name] != digest:
            raise SystemExit(f"checksum mismatch for {name}: {digest}")
        (dest / name).write_bytes(data)
        print(f"  {name}  {digest}")


def tofu_checksums(dest: Path, files: dict):
    sums = dest / "SHA256SUMS"
    known = {}
    if sums.exists():
        for line in sums.read_text().splitlines():
            digest, name = line.split()
            known[name] = digest
    write_verified(dest, files, known)
    if not known:
        sums.write_text("".join(f"{sha256(d)}  {n}\n" for n, d in sorted(files.items())))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("datasets", nargs="+", choices=["mnist", "fashion_mnist", "cifar10"])
    parser.add_argument("--root", default="data")
    args = parser.parse_args(argv)
    root = Path(args.root)
    for name in args.datasets:
        print(f"{name}:")
        if name == "mnist":
            files = fetch_idx_set(MNIST_MIRRORS, list(MNIST_SHA256)) or fetch_mnist_npm()
            if set(files) != set(MNIST_SHA256):
                print("  could not download MNIST", file=sys.stderr)
                return 1
            write_verified(root / name, files, MNIST_SHA256)
        elif name == "fashion_mnist":
            files = fetch_idx_set([FASHION_MIRROR], list(MNIST_SHA256))
            if not files:
                print("  could not download Fashion-MNIST", file=sys.stderr)
                return 1
            tofu_checksums(root / name, files)
        else:
            try:
                tar = tarfile.open(fileobj=io.BytesIO(get(CIFAR_URL, timeout=300)), mode="r:gz")
            except Exception as exc:
                print(f"  could not download CIFAR-10: {exc}", file=sys.stderr)
                return 1
            files = {Path(m.name).name: tar.extractfile(m).read() for m in tar.getmembers()
                     if m.name.endswith(".bin")}
            tofu_checksums(root / name, files)
    return 0


if __name__ == "__main__":
    sys.exit(main())
