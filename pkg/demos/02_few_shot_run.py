# # A small few-shot run end to end
#
# Generate a synthetic corpus whose actions are built from shared
# sub-events, train the prompt ensemble on five instances per class and
# score the held-out videos.

import time

from otprompt.datagen import GenSpec, generate_corpus
from otprompt.evalkit import evaluate
from otprompt.model import TrainConfig, predict
from otprompt.trainer import train

corpus = generate_corpus(GenSpec(num_classes=4, train_videos=30, test_videos=12, seed=3))
print(corpus.num_classes, "classes,", corpus.feature_dim, "dims")
for c in range(corpus.num_classes):
    print("class", c, "sub-events", corpus.sub_events(c))

# Training only touches the sampled support videos; annotated instances that
# were not sampled are ignored rather than treated as background.

cfg = TrainConfig(epochs=40, seed=3)
t0 = time.time()
result = train(corpus.splits["train"], cfg, corpus.num_classes)
print("support videos", [s.video_id for s in result.support])
print("loss first %.4f last %.4f (%.1fs)" % (result.history[0].total, result.history[-1].total, time.time() - t0))

test = corpus.splits["test"]
report = evaluate({s.video_id: predict(result.model, s) for s in test}, test, num_classes=corpus.num_classes)
print(report.table())

# One video's top detections next to its ground truth.

seq = test[0]
print("truth", [(a.start, a.end, a.class_id) for a in seq.annotations])
for inst in predict(result.model, seq)[:5]:
    print("pred ", inst.as_tuple())
