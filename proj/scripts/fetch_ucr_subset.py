"""Fetch the UCR datasets bundled with the pyts wheel and write them as
<root>/<Name>/<Name>_TRAIN.tsv and _TEST.tsv."""

import argparse
import io
import pathlib
import subprocess
import sys
import tempfile
import zipfile

WHEEL = "pyts==0.13.0"
PREFIX = "pyts/datasets/cached_datasets/UCR/"


def convert(text):
    rows = []
    for line in text.splitlines():
        fields = line.split()
        if not fields:
            continue
        label = float(fields[0])
        label = str(int(label)) if label.is_integer() else fields[0]
        rows.append("\t".join([label] + fields[1:]))
    return "\n".join(rows) + "\n"


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("root", type=pathlib.Path)
    parser.add_argument("--wheel", type=pathlib.Path, help="use an already downloaded wheel")
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel
        if wheel is None:
            subprocess.run([sys.executable, "-m", "pip", "download", WHEEL, "--no-deps", "-q", "-d", tmp],
                           check=True)
            wheel = next(pathlib.Path(tmp).glob("pyts-*.whl"))
        with zipfile.ZipFile(wheel) as z:
            for name in z.namelist():
                if not name.startswith(PREFIX) or not name.endswith(("_TRAIN.txt", "_TEST.txt")):
                    continue
                stem = pathlib.PurePosixPath(name).stem
                dataset = stem.rsplit("_", 1)[0]
                out = args.root / dataset / (stem + ".tsv")
                out.parent.mkdir(parents=True, exist_ok=True)
                out.write_text(convert(io.TextIOWrapper(z.open(name), encoding="utf-8").read()))
                print(out)


if __name__ == "__main__":
    main()
