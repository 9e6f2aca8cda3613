"""Train a small causal Flowformer on the copy task and look at its competition.

The copy task shows a run of symbols, a separator, and asks the model to
reproduce the run. Before training the competition over sources is almost
uniform. After training it is sharp, because each output position has to
pick out one earlier symbol. Takes about a minute on one core.
"""

import numpy as np

from flowformer.attention import AttentionConfig
from flowformer.model import forward, init_parameters
from flowformer.training import TrainConfig, competition_entropy_gap, make_task, model_for_task, train

task = make_task("copy", seq_len=11, vocab=8)
model = model_for_task(task, layers=2, d=32, heads=4, attention=AttentionConfig(mechanism="flow_causal"))
cfg = TrainConfig(steps=2500, batch_size=32, lr=2e-3, warmup=100, eval_interval=500)
evals = task.eval_batches(0, 2, 32)

print(f"entropy gap before training: {competition_entropy_gap(init_parameters(model, cfg.seed), evals):.3f} nats")
ckpt, metrics = train(model, task, cfg, progress=lambda row: print(
    f"step {row[0]:4d}  train loss {row[1]:.3f}  eval accuracy {row[2]:.3f}"))
print(f"entropy gap after training:  {competition_entropy_gap(ckpt, evals):.3f} nats")

batch = evals[0]
tokens, copied = batch.inputs[0], batch.loss_mask[0] > 0
capture = []
logits = forward(ckpt, tokens, capture=capture)
print("\ninput:          ", tokens.tolist())
print("copied half:    ", batch.targets[0][copied].tolist())
print("model predicts: ", logits.argmax(-1)[copied].tolist())
print("layer 0 competition weights per source, head 0:")
print(np.round(capture[0].competition_weights()[:, 0], 3))
