#!/usr/bin/env python3
"""Download the UCI Combined Cycle Power Plant dataset and convert it to CSV.

Writes data/powerplant.csv with columns AT,V,AP,RH,PE (PE is the target).
Needs internet access to archive.ics.uci.edu; the conversion itself uses
only the standard library (the workbook's first sheet is parsed directly
from the xlsx XML).

Usage: python scripts/fetch_powerplant.py [output.csv]
"""

import io
import re
import sys
import urllib.request
import zipfile
from pathlib import Path
from xml.etree import ElementTree

URL = "https://archive.ics.uci.edu/static/public/294/combined+cycle+power+plant.zip"
NS = {"m": "http://schemas.openxmlformats.org/spreadsheetml/2006/main"}


def sheet_rows(xlsx_bytes):
    with zipfile.ZipFile(io.BytesIO(xlsx_bytes)) as zf:
        shared = []
        if "xl/sharedStrings.xml" in zf.namelist():
            root = ElementTree.fromstring(zf.read("xl/sharedStrings.xml"))
            shared = ["".join(t.text or "" for t in si.iter(
                "{%s}t" % NS["m"])) for si in root]
        sheet = ElementTree.fromstring(zf.read("xl/worksheets/sheet1.xml"))
        for row in sheet.iter("{%s}row" % NS["m"]):
            values = []
            for cell in row.iter("{%s}c" % NS["m"]):
                v = cell.find("{%s}v" % NS["m"])
                if v is None:
                    values.append("")
                elif cell.get("t") == "s":
                    values.append(shared[int(v.text)])
                else:
                    values.append(v.text)
            yield values


def main():
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("data/powerplant.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    print(f"downloading {URL} ...")
    with urllib.request.urlopen(URL) as resp:
        payload = resp.read()
    with zipfile.ZipFile(io.BytesIO(payload)) as zf:
        xlsx_name = next(n for n in zf.namelist()
                         if re.search(r"Folds5x2_pp\.xlsx$", n))
        xlsx = zf.read(xlsx_name)
    rows = list(sheet_rows(xlsx))
    header, body = rows[0], rows[1:]
    if header[:5] != ["AT", "V", "AP", "RH", "PE"]:
        raise SystemExit(f"unexpected sheet header: {header}")
    with out.open("w") as fh:
        fh.write(",".join(header[:5]) + "\n")
        for row in body:
            if len(row) >= 5 and all(row[:5]):
                fh.write(",".join(row[:5]) + "\n")
    print(f"wrote {out} ({len(body)} rows)")


if __name__ == "__main__":
    main()
