import numpy as np
import pytest

from scmil.checkpoint import (MAGIC, Checkpoint, checkpoint_from_model, dumps, load_checkpoint, loads,
                              model_from_checkpoint, save_checkpoint)
from scmil.exceptions import FormatError
from scmil.mil import Bag, build_model, forward


def random_model(seed=0):
    model = build_model("abmil_gated", 7, 8, sc=True, atoms=16, layers=2, attention_dim=5, seed=seed,
                        lambda_hidden=(6, 3))
    rng = np.random.default_rng(seed)
    for arr in model.named_parameters().values():
        arr += rng.standard_normal(arr.shape) * rng.choice([1e-300, 1e-5, 1.0, 1e5], arr.shape)
    return model


def test_round_trip_bit_exact(tmp_path):
    ckpt = checkpoint_from_model(random_model(), {"seed": 3},
                                 [{"epoch": 0, "lr": 1e-4, "train_loss": 0.7, "val_accuracy": float("nan"),
                                   "val_auc": float("nan")}])
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, ckpt)
    back = load_checkpoint(path)
    assert back == ckpt
    save_checkpoint(tmp_path / "again.ckpt", back)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_model_restored():
    model = random_model(1)
    clone = model_from_checkpoint(loads(dumps(checkpoint_from_model(model))))
    assert clone.config() == model.config()
    for (na, a), (nb, b) in zip(model.named_parameters().items(), clone.named_parameters().items()):
        assert na == nb and a.tobytes() == b.tobytes()
    bag = Bag(np.random.default_rng(0).standard_normal((4, 7)), 1)
    assert forward(model, bag).prob == forward(clone, bag).prob


def test_special_values():
    vals = np.array([[0.0, -0.0, 5e-324, 1.7976931348623157e308, 0.1, 1 / 3]])
    back = loads(dumps(Checkpoint({"t": vals})))
    assert back.tensors["t"].tobytes() == vals.tobytes()


def test_format_layout():
    text = dumps(Checkpoint({"a": np.array([1.5, 2.0]), "s": np.array(3.0)}, {"k": "v"}))
    assert text == f"{MAGIC}\n2\na 1 2\n1.5 2.0\ns 1 1\n3.0\n# k=v\n"


def test_truncated():
    text = dumps(checkpoint_from_model(random_model()))
    for cut in (len(text) - 1, len(text) // 2, 20):
        with pytest.raises(FormatError):
            loads(text[:cut])
    lines = text.split("\n")
    with pytest.raises(FormatError):
        loads("\n".join(lines[:5]) + "\n")


@pytest.mark.parametrize("count", ["1", "3"])
def test_count_mismatch(count):
    text = dumps(Checkpoint({"a": np.ones((1, 2)), "b": np.ones((2, 1))}))
    bad = text.replace("\n2\n", f"\n{count}\n", 1)
    with pytest.raises(FormatError) as err:
        loads(bad)
    assert "line" in str(err.value)


@pytest.mark.parametrize("text, line", [
    ("SCMIL-CKPT v2\n0\n", 1),
    (f"{MAGIC}\nx\n", 2),
    (f"{MAGIC}\n1\na 1 2\n1.0\n", 4),
    (f"{MAGIC}\n1\na 1 1\nfoo\n", 4),
    (f"{MAGIC}\n2\na 1 1\n1.0\na 1 1\n2.0\n", 5),
    (f"{MAGIC}\n1\na 1 1\n1.0\njunk\n", 5),
    (f"{MAGIC}\n1\na one 1\n1.0\n", 3),
])
def test_malformed_line_numbers(text, line):
    with pytest.raises(FormatError) as err:
        loads(text)
    assert err.value.lineno == line


def test_model_missing_tensor():
    ckpt = checkpoint_from_model(random_model())
    del ckpt.tensors["head.bias"]
    with pytest.raises(FormatError):
        model_from_checkpoint(ckpt)
