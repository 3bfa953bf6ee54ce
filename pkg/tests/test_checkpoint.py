import hashlib
import struct

import numpy as np
import pytest

from vsedistill import autodiff as ad
from vsedistill.checkpoint import (FORMAT_VERSION, MAGIC, CheckpointError, ChecksumError, VersionError,
                                   dumps_checkpoint, load_checkpoint, loads_checkpoint, record_checksums,
                                   save_checkpoint)
from vsedistill.corpus import CorpusConfig, generate_corpus
from vsedistill.model import ModelConfig, sparse_embeddings
from vsedistill.retrieval import evaluate
from vsedistill.trainer import STAGE2, TrainConfig, finetune_stage, pretrain_stage

SMALL = ModelConfig(model_dim=16, embed_dim=16, n_layers=1, n_heads=2, n_mask_tokens=2, decoder_layers=1,
                    decoder_heads=2)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(CorpusConfig(n_train=32, n_val=8, n_test=8, seed=2))


@pytest.fixture(scope="module")
def ckpts(corpus):
    s1 = pretrain_stage(corpus, TrainConfig(epochs=1), SMALL)
    return s1, finetune_stage(s1, corpus, TrainConfig(epochs=1))


def reseal(blob: bytes) -> bytes:
    body = blob[:-32]
    return body + hashlib.sha256(body).digest()


@pytest.mark.parametrize("which", [0, 1])
def test_roundtrip_identity(ckpts, corpus, tmp_path, which):
    ck = ckpts[which]
    back = load_checkpoint(save_checkpoint(ck, tmp_path / "m.ckpt"))
    assert back.stage == ck.stage and back.meta == ck.meta and back.train_config == ck.train_config
    assert back.model.config == ck.model.config
    assert back.model.checksum() == ck.model.checksum()
    assert back.optimizer.step == ck.optimizer.step
    assert all(np.array_equal(back.optimizer.m[k], ck.optimizer.m[k]) for k in ck.optimizer.m)
    assert evaluate(back, corpus).to_json() == evaluate(ck, corpus).to_json()
    assert dumps_checkpoint(back) == dumps_checkpoint(ck)


def test_forward_bit_equality(ckpts, corpus):
    ck = ckpts[1]
    back = loads_checkpoint(dumps_checkpoint(ck))
    views = [v for s in corpus.scenes[:4] for v in s.sparse_views]
    with ad.no_grad():
        a = sparse_embeddings(ck.model, views)[1].data
        b = sparse_embeddings(back.model, views)[1].data
    assert a.tobytes() == b.tobytes()


def test_stage2_carries_stage1_checksum(ckpts):
    s1, s2 = ckpts
    back = loads_checkpoint(dumps_checkpoint(s2))
    assert back.stage == STAGE2
    assert back.meta["stage1_dense_checksum"] == s1.meta["dense_checksum"] == back.model.checksum(("dense",))


def test_layout(ckpts):
    blob = dumps_checkpoint(ckpts[0])
    assert blob[:8] == MAGIC
    assert struct.unpack_from("<I", blob, 8)[0] == FORMAT_VERSION
    assert set(record_checksums(ckpts[0])) == set(ckpts[0].model.named_parameters())


def test_every_corrupted_byte_is_detected(ckpts):
    blob = dumps_checkpoint(ckpts[0])
    rng = np.random.default_rng(0)
    for pos in rng.choice(len(blob), 25, replace=False):
        bad = bytearray(blob)
        bad[pos] ^= 0x01
        with pytest.raises(ChecksumError):
            loads_checkpoint(bytes(bad))


def test_record_crc_catches_resealed_payload_flip(ckpts):
    blob = bytearray(dumps_checkpoint(ckpts[0]))
    blob[-32 - 40] ^= 0xFF  # inside the last record's payload
    with pytest.raises(ChecksumError, match="record"):
        loads_checkpoint(reseal(bytes(blob)))


def test_version_mismatch(ckpts):
    blob = bytearray(dumps_checkpoint(ckpts[0]))
    struct.pack_into("<I", blob, 8, FORMAT_VERSION + 1)
    with pytest.raises(VersionError):
        loads_checkpoint(reseal(bytes(blob)))


def test_bad_magic_and_truncation(ckpts):
    blob = dumps_checkpoint(ckpts[0])
    with pytest.raises(CheckpointError, match="magic"):
        loads_checkpoint(reseal(b"NOTACKPT" + blob[8:]))
    with pytest.raises(ChecksumError):
        loads_checkpoint(blob[:-100])
    with pytest.raises(CheckpointError, match="short"):
        loads_checkpoint(b"VSED")
