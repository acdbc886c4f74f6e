import importlib.util
from pathlib import Path

import numpy as np

from scmil.data import load_bags_csv

_spec = importlib.util.spec_from_file_location(
    "convert_musk", Path(__file__).resolve().parents[1] / "scripts" / "convert_musk.py")
convert_musk = importlib.util.module_from_spec(_spec)
_spec.loader.exec_module(convert_musk)


def _line(mol, conf, value, label):
    return ",".join([mol, conf] + [str(value)] * 166 + [f"{label}."])


def test_conversion(tmp_path):
    src = tmp_path / "clean.data"
    src.write_text("\n".join([_line("MUSK-1", "1_1", 3, 1), _line("NON-MUSK-2", "2_1", -5, 0),
                              _line("MUSK-1", "1_2", 7, 1)]) + "\n")
    out = tmp_path / "musk.csv"
    assert convert_musk.main([str(src), str(out), "--expect", "2,3"]) == 0
    ds = load_bags_csv(out)
    assert [b.id for b in ds.bags] == ["MUSK-1", "NON-MUSK-2"] and ds.feature_dim == 166
    assert ds.bags[0].label == 1 and ds.bags[1].label == 0
    np.testing.assert_array_equal(ds.bags[0].instances[:, 0], [3.0, 7.0])
    assert convert_musk.main([str(src), str(out), "--expect", "92,476"]) == 1
