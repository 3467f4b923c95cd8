# Cross-checks the published CIEDE2000 verification pairs in
# ../data/ciede2000_pairs.csv against scikit-image's independent
# implementation. Prints max deviation.
import csv
import pathlib

import numpy as np
from skimage.color import deltaE_ciede2000

path = pathlib.Path(__file__).parent.parent / "data" / "ciede2000_pairs.csv"
worst = 0.0
with open(path) as f:
    for row in csv.DictReader(f):
        a = np.array([float(row[k]) for k in ("l1", "a1", "b1")])
        b = np.array([float(row[k]) for k in ("l2", "a2", "b2")])
        ref = float(row["delta_e"])
        d = float(deltaE_ciede2000(a, b))
        worst = max(worst, abs(d - ref))
        print(f"{d:.6f} {ref:.4f}")
print("max |oracle - published| =", worst)
