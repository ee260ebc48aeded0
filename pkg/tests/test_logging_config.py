import json
import logging

import numpy as np

from steering.logging_config import JSONFormatter


def make_record(**extra):
    rec = logging.LogRecord("steering.test", logging.WARNING, __file__, 1, "sinkhorn did not converge", None, None)
    for k, v in extra.items():
        setattr(rec, k, v)
    return rec


def test_extras_are_plain_json():
    line = JSONFormatter().format(make_record(iters=np.int64(12), violation=np.float64(0.5), eps=np.array([0.1, 0.2])))
    doc = json.loads(line)
    assert doc["level"] == "WARNING"
    assert doc["name"] == "steering.test"
    assert doc["msg"] == "sinkhorn did not converge"
    assert doc["iters"] == 12
    assert doc["violation"] == 0.5
    assert doc["eps"] == [0.1, 0.2]
    assert doc["ts"].endswith("Z")


def test_unserialisable_extras_fall_back_to_str():
    doc = json.loads(JSONFormatter().format(make_record(path=object(), big=np.zeros(100))))
    assert doc["path"].startswith("<object")
    assert isinstance(doc["big"], str)
