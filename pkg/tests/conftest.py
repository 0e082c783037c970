import numpy as np

from mde.traceio import MdetRecord, MdetTensor

GOLDEN_PATH = "tests/data/golden_model.mdet"


def golden_record() -> MdetRecord:
    """Fixed model record backing the checked-in byte-layout golden file.

    Every value is exactly representable in f32 so the on-disk payload is
    reproducible bit for bit.
    """
    conv_w = (np.arange(18, dtype=np.float64) - 9.0) / 8.0
    tensors = [
        MdetTensor(name="layer00/w", role="weight", layer_index=0, array=conv_w.reshape(2, 1, 3, 3)),
        MdetTensor(name="layer00/b", role="bias", layer_index=0, array=np.array([0.5, -0.5])),
        MdetTensor(name="bn0/gamma", role="bn_gamma", layer_index=0, array=np.array([1.0, 0.5])),
        MdetTensor(name="bn0/beta", role="bn_beta", layer_index=0, array=np.array([0.0, -0.25])),
        MdetTensor(name="bn0/running_mean", role="bn_running_mean", layer_index=0, array=np.array([0.125, 0.25])),
        MdetTensor(name="bn0/running_var", role="bn_running_var", layer_index=0, array=np.array([1.0, 2.0])),
    ]
    metadata = {
        "creator": "mde-toynet",
        "dataset_id": "",
        "eps": 1e-5,
        "model_id": "golden",
        "retain_alpha": 0.9,
        "seed": 7,
    }
    return MdetRecord(kind="model", tensors=tensors, metadata=metadata)
