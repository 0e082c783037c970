"""
Trace files and statistics-only scoring
=======================================

Models and activation traces serialize to the MDET container, so drift can
be scored long after (or far away from) the forward passes that produced
the activations. The Wasserstein and KL variants only need per-channel
statistics, which stream out of a trace one entry at a time.
"""

import tempfile
from pathlib import Path

import mde
from mde.drift import score_stats
from mde.toynet import forward
from mde.traceio import (
    bn_states_from_model_file,
    read_mdet,
    stats_only_view,
    toy_to_record,
    trace_to_record,
    write_mdet,
)

ds = mde.generate_dataset(class_count=3, samples_per_class=60, seed=5)
model = mde.train(mde.default_model(3, seed=5), ds.images, ds.labels, mde.TrainConfig(epochs=12, seed=5))

workdir = Path(tempfile.mkdtemp())
model_path = workdir / "model.mdet"
trace_path = workdir / "trace.mdet"

write_mdet(toy_to_record(model), model_path)

batches = list(mde.minibatch_stream(ds.images, 16, 3, seed=6))
captured = [forward(model, b, trace=True)[1] for b in batches]
write_mdet(trace_to_record(captured, model.model_id, "demo-data"), trace_path)
print(f"wrote {model_path.stat().st_size} model bytes and {trace_path.stat().st_size} trace bytes")

model_file = read_mdet(model_path)
trace_file = read_mdet(trace_path)
states = bn_states_from_model_file(model_file)
per_layer_stats = stats_only_view(trace_file)
per_batch = [[per_layer_stats[l][b] for l in range(len(per_layer_stats))] for b in range(len(batches))]

cfg = mde.DriftConfig(metric="wasserstein", batch_size=16, iterations=3)
report = score_stats(states, per_batch, cfg, model_id=model.model_id, dataset_id="demo-data")
print(f"statistics-only Wasserstein drift from the trace: {report.aggregate:.5f}")
