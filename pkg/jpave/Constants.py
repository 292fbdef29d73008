import os

import numpy as np

DTYPE = np.float32 if os.environ.get("JPAVE_FLOAT32") else np.float64

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
SEP_TOKEN = "[SEP]"
EOS_TOKEN = "[EOS]"
BOS_TOKEN = "[BOS]"
SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, SEP_TOKEN, EOS_TOKEN, BOS_TOKEN)
PAD_ID, UNK_ID, SEP_ID, EOS_ID, BOS_ID = range(len(SPECIAL_TOKENS))

L_MAX = 46
D_A = 768
ENCODER_HIDDEN = 384
T_MAX = 10
TRAIN_BATCH_SIZE = 64
VAL_BATCH_SIZE = 16
TEST_BATCH_SIZE = 16

LEARNING_RATE = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
CLIP_NORM = 5.0
INIT_RANGE = 0.08
PATIENCE = 5
THRESHOLD = 0.5

LOG_FLOOR = 1e-12
PROB_CLAMP = 1e-12

FORMAT_MAGIC = b"JPAVE\x00"
FORMAT_VERSION = 1

TRAIN_FILE = "train.jsonl"
VAL_FILE = "val.jsonl"
TEST_FILE = "test.jsonl"
SCHEMA_FILE = "schema.json"
MANIFEST_FILE = "manifest.json"
