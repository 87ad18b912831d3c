import numpy as np
import pytest

from edmcast.autoencoder import (
    AEModule, AESpec, IdentityAutoencoder, TorchAutoencoder, evaluate_reconstruction, train_autoencoder,
    write_recon_csv,
)
from edmcast.grid import NormStats
from edmcast.toy_data import BlobWorldConfig, make_split
from edmcast.training import TrainConfig


class Offset(IdentityAutoencoder):
    def decode(self, z):
        return z + 1.0


@pytest.fixture(scope="module")
def blobs():
    cfg = BlobWorldConfig(grid=16, width_range=(2.0, 4.0), seed=6)
    seqs, _ = make_split(cfg, None, 100, "train", 3)
    kelvin = seqs.reshape(-1, 1, 16, 16)
    stats = NormStats(float(kelvin.mean()), float(kelvin.std()))
    return kelvin, stats


def test_identity_report_zero(blobs):
    rep = evaluate_reconstruction(IdentityAutoencoder(), blobs[0])
    assert (rep.bias, rep.mae, rep.rmse) == (0.0, 0.0, 0.0) and not rep.worst_pixel.any()


def test_offset_sign(blobs):
    rep = evaluate_reconstruction(Offset(), blobs[0])
    assert rep.bias == pytest.approx(-1) and rep.mae == pytest.approx(1) and rep.rmse == pytest.approx(1)


def test_shape_contract(blobs):
    class Crop(IdentityAutoencoder):
        def decode(self, z):
            return z[..., :-1]

    with pytest.raises(ValueError):
        evaluate_reconstruction(Crop(), blobs[0][:2])


def test_latent_shape():
    ae = TorchAutoencoder(AEModule(AESpec(latent_channels=4, compression=2)))
    z = ae.encode(np.zeros((2, 1, 64, 64), np.float32))
    assert z.shape == (2, 4, 32, 32) == ae.latent_shape((2, 1, 64, 64))
    assert ae.decode(z).shape == (2, 1, 64, 64)
    with pytest.raises(ValueError):
        AESpec(compression=3)


def test_linear_identity_ae(blobs):
    kelvin, stats = blobs
    data = ((kelvin - stats.mean) / stats.std).astype(np.float32)
    ae, _ = train_autoencoder(data, AESpec(latent_channels=1, compression=1, linear=True),
                              TrainConfig(epochs=40, batch_size=32, lr=1e-2, patience=40))
    rep = evaluate_reconstruction(ae, data)
    assert rep.rmse < 0.01


def test_compressing_ae_beats_mean_and_oracle(blobs):
    kelvin, stats = blobs
    data = ((kelvin - stats.mean) / stats.std).astype(np.float32)
    ae, hist = train_autoencoder(data, AESpec(latent_channels=4, compression=2, width=8),
                                 TrainConfig(epochs=15, batch_size=32, lr=3e-3, patience=15))
    rep = evaluate_reconstruction(ae, kelvin, stats)
    assert rep.rmse < kelvin.std()

    # independent two-pass metric computation
    recon = ae.decode(ae.encode((kelvin.astype(np.float64) - stats.mean) / stats.std)) * stats.std + stats.mean
    err = kelvin.astype(np.float64) - recon
    total, count = 0.0, 0
    for e in err:
        total += float(np.sum(e))
        count += e.size
    mean_err = total / count
    sq = sum(float(np.sum(e * e)) for e in err)
    ab = sum(float(np.sum(np.abs(e))) for e in err)
    assert rep.bias == pytest.approx(mean_err, abs=1e-6)
    assert rep.rmse == pytest.approx(np.sqrt(sq / count), abs=1e-6)
    assert rep.mae == pytest.approx(ab / count, abs=1e-6)

    # encoded train latents are standardized per channel
    z = ae.encode(data[:240])
    assert np.abs(z.mean(axis=(0, 2, 3))).max() < 0.05


def test_variational_runs(blobs):
    kelvin, stats = blobs
    data = ((kelvin[:40] - stats.mean) / stats.std).astype(np.float32)
    ae, hist = train_autoencoder(data, AESpec(variational=True, width=4), TrainConfig(epochs=2, batch_size=8))
    assert np.isfinite(hist[-1]["val_loss"])


def test_recon_csv(tmp_path, blobs):
    write_recon_csv(tmp_path / "r.csv", {"identity": evaluate_reconstruction(IdentityAutoencoder(), blobs[0][:4])})
    assert (tmp_path / "r.csv").read_text().splitlines() == ["model,bias,mae,rmse", "identity,0.0,0.0,0.0"]
