import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cfdsurrogate.estimator import Seq2SeqSurrogate


def toy(n=60, f=4, seed=0):
    rng = np.random.default_rng(seed)
    series = np.cumsum(rng.normal(scale=0.1, size=(n + 3, f)), axis=0)
    X = np.stack([series[i:i + 3] for i in range(n)])
    y = series[3:n + 3]
    return X.astype(np.float32), y


def test_get_params_and_clone():
    est = Seq2SeqSurrogate(encoder_units=5, epochs=2)
    params = est.get_params()
    assert params["encoder_units"] == 5 and params["epochs"] == 2 and params["lr"] == 0.00025
    assert clone(est).get_params() == params


def test_fit_predict_shapes_and_learning():
    X, y = toy()
    est = Seq2SeqSurrogate(encoder_units=8, decoder_units=8, head_units=6, epochs=8, batch_size=6, lr=5e-3)
    est.fit(X, y, eval_set=(X[:10], y[:10]))
    assert est.predict(X).shape == (60, 4)
    assert est.history_.train_loss[-1] < est.history_.train_loss[0]
    assert np.isfinite(est.score(X, y))


def test_three_d_targets_keep_horizon_axis():
    X, y = toy(30)
    est = Seq2SeqSurrogate(encoder_units=3, decoder_units=3, head_units=2, epochs=1, batch_size=5)
    assert est.fit(X, y[:, None, :]).predict(X).shape == (30, 1, 4)


def test_deterministic_fit():
    X, y = toy(30)
    kw = dict(encoder_units=3, decoder_units=3, head_units=2, epochs=2, batch_size=5, seed=3)
    a = Seq2SeqSurrogate(**kw).fit(X, y).predict(X)
    b = Seq2SeqSurrogate(**kw).fit(X, y).predict(X)
    assert a.tobytes() == b.tobytes()


def test_validation_errors():
    X, y = toy(30)
    est = Seq2SeqSurrogate(encoder_units=3, decoder_units=3, head_units=2, epochs=1, batch_size=5)
    with pytest.raises(ValueError):
        est.fit(X[:, :, 0], y)
    with pytest.raises(ValueError):
        est.fit(X, y[:10])
    bad = X.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        est.fit(bad, y)
    with pytest.raises(ValueError):
        Seq2SeqSurrogate(lr=-1).fit(X, y)
    with pytest.raises(NotFittedError):
        est.predict(X)
    est.fit(X, y)
    with pytest.raises(ValueError):
        est.predict(X[:, :, :3])


def test_save_load(tmp_path):
    X, y = toy(30)
    est = Seq2SeqSurrogate(encoder_units=3, decoder_units=3, head_units=2, epochs=1, batch_size=5).fit(X, y)
    est.save(tmp_path / "m.ckpt")
    back = Seq2SeqSurrogate.load(tmp_path / "m.ckpt")
    assert back.predict(X).tobytes() == est.predict(X).tobytes()
    assert back.get_params()["encoder_units"] == 3
