"""
Teacher, student and baselines at miniature scale
=================================================

Train a teacher-forced model, distil it into a free-running student, train
scheduled-sampling and free-running baselines, and compare them on longer
out-of-domain strings.  Sizes are cut down so the whole script runs in a
few minutes.  At this size the models are undertrained and the table's
ranking is noise.  The acceptance suite uses the full default configuration.
Run with ``python3 demos/teacher_student.py``.
"""

from distilltron.config import ModelConfig, TrainConfig
from distilltron.data import build_corpus
from distilltron.distill import train_baseline, train_student, train_teacher
from distilltron.evaluation import evaluate, format_table

corpus = build_corpus(n_train=40, n_test=8, n_ood=8, train_lengths=(3, 6), ood_lengths=(10, 14),
                      n_mels=20, seed=0)
train = corpus.split("train")
model = ModelConfig(n_mels=20, hidden_dim=16)
cfg = TrainConfig(total_steps=300, decay_start_step=100, batch_size=8)

# step 1: teacher forcing
teacher, log = train_teacher(train, model, cfg)
print("teacher feature loss", log[0].losses.feature, "->", log[-1].losses.feature)

# step 2: the student starts from the teacher and runs free, matching its decoder states
student, log = train_student(train, teacher, cfg)
print("student distillation loss", log[0].losses.distillation, "->", log[-1].losses.distillation)

ss, _ = train_baseline("SS", train, model, cfg)
fr, _ = train_baseline("FR", train, model, cfg)

ood = corpus.split("test-out-of-domain")
reports = [evaluate(p, ood, name) for p, name in
           ((teacher, "TF"), (student, "KD"), (ss, "SS"), (fr, "FR"))]
print(format_table(reports))
