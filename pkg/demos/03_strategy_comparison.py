# # How the alignment rule changes the scores
#
# Same corpus, same seed, four ways of turning frame-to-prompt costs into a
# class score: the transport plan, a hard one-to-one assignment, the all-pairs
# squared distance, and a single averaged prompt.

import numpy as np

from otprompt.datagen import GenSpec, generate_corpus
from otprompt.evalkit import evaluate
from otprompt.model import STRATEGIES, TrainConfig, forward, predict
from otprompt.trainer import train

corpus = generate_corpus(GenSpec(num_classes=4, train_videos=30, test_videos=12, seed=5))
test = corpus.splits["test"]

models = {}
for strategy in STRATEGIES:
    res = train(corpus.splits["train"], TrainConfig(strategy=strategy, epochs=30, seed=5), corpus.num_classes)
    models[strategy] = res.model
    rep = evaluate({s.video_id: predict(res.model, s) for s in test}, test, num_classes=corpus.num_classes)
    print(f"{strategy:10s} avg mAP {100 * rep.average_map:6.2f}")

# Where along the first test video does each prompt of the true class pick
# up mass? Each column is one prompt; rows are frames at full resolution.

seq = test[0]
cls = seq.annotations[0].class_id
lv = forward(models["ot"], seq.features).levels[0]
weights = lv.plan[cls] / lv.plan[cls].sum(axis=1, keepdims=True)
a = seq.annotations[0]
inside = weights[int(a.start):int(a.end)].mean(0)
outside = np.delete(weights, np.arange(int(a.start), int(a.end)), axis=0).mean(0)
print("per-prompt weight inside the action ", np.round(inside, 3))
print("per-prompt weight outside the action", np.round(outside, 3))
