"""Line-delimited JSON input formats.

Rerank input::

    {"query": [12, 7, 9]}                 # or {"query_text": "..."}
    {"id": "doc-1", "tokens": [4, 4, 18]} # or {"id": ..., "text": "..."}
    ...

Evaluation / calibration datasets, one record per line::

    {"query": [...], "candidates": [{"id": ..., "tokens": [...]}, ...],
     "relevant": ["doc-1", ...], "scores_by_layer": [[...], ...]}

``scores_by_layer`` is optional; when present it replaces the score head
(layer x candidate table, candidates in listed order).

Text fields are tokenized byte-wise: token ``b + 1`` for every UTF-8 byte
``b``, folded into the vocabulary.  That is a stand-in, not a real tokenizer.
"""
import json
from typing import NamedTuple

from .engine import CandidateBatch
from .errors import ContractError, InputError


def byte_tokens(text, vocab_size):
    if vocab_size < 2:
        raise ContractError("byte tokenization needs vocab_size >= 2")
    return [1 + b % (vocab_size - 1) for b in text.encode("utf-8")]


def _json_lines(path):
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"invalid JSON: {exc.msg}", line=lineno) from None
            if not isinstance(obj, dict):
                raise InputError("expected a JSON object", line=lineno)
            yield lineno, obj


def _tokens(obj, key_tokens, key_text, vocab_size, lineno):
    if key_tokens in obj:
        toks = obj[key_tokens]
        if not isinstance(toks, list) or not all(
            isinstance(t, int) and not isinstance(t, bool) for t in toks
        ):
            raise InputError(f"{key_tokens!r} must be a list of integers", line=lineno)
        return toks
    if key_text in obj:
        if not isinstance(obj[key_text], str):
            raise InputError(f"{key_text!r} must be a string", line=lineno)
        return byte_tokens(obj[key_text], vocab_size)
    raise InputError(f"missing {key_tokens!r} or {key_text!r}", line=lineno)


def _candidates(items, vocab_size, lineno):
    out = []
    seen = set()
    for item in items:
        if not isinstance(item, dict) or "id" not in item:
            raise InputError("candidate needs an 'id'", line=lineno)
        cid = item["id"]
        if not isinstance(cid, (str, int)) or isinstance(cid, bool):
            raise InputError("candidate id must be a string or integer", line=lineno)
        if cid in seen:
            raise InputError(f"duplicate candidate id {cid!r}", line=lineno)
        seen.add(cid)
        out.append((cid, _tokens(item, "tokens", "text", vocab_size, lineno)))
    return out


def read_rerank_input(path, vocab_size):
    """Parse a rerank input file into a :class:`CandidateBatch`."""
    lines = list(_json_lines(path))
    if not lines:
        raise InputError("input is empty", line=1)
    lineno, head = lines[0]
    if "query" not in head and "query_text" not in head:
        raise InputError("first record must hold 'query' or 'query_text'", line=lineno)
    query = _tokens(head, "query", "query_text", vocab_size, lineno)
    candidates = []
    seen = set()
    for lineno, obj in lines[1:]:
        (cid, toks), = _candidates([obj], vocab_size, lineno)
        if cid in seen:
            raise InputError(f"duplicate candidate id {cid!r}", line=lineno)
        seen.add(cid)
        candidates.append((cid, toks))
    if not candidates:
        raise InputError("no candidate records", line=lineno + 1)
    return CandidateBatch.from_pairs(query, candidates)


class EvalRecord(NamedTuple):
    query: tuple
    batch: CandidateBatch
    relevant: frozenset
    scores_by_layer: list


def read_dataset(path, vocab_size):
    records = []
    for lineno, obj in _json_lines(path):
        for key in ("query", "candidates", "relevant"):
            if key not in obj:
                raise InputError(f"missing {key!r}", line=lineno)
        query = _tokens(obj, "query", "query_text", vocab_size, lineno)
        if not isinstance(obj["candidates"], list) or not obj["candidates"]:
            raise InputError("'candidates' must be a nonempty list", line=lineno)
        cands = _candidates(obj["candidates"], vocab_size, lineno)
        if not isinstance(obj["relevant"], list):
            raise InputError("'relevant' must be a list", line=lineno)
        ids = {cid for cid, _ in cands}
        relevant = frozenset(obj["relevant"])
        if not relevant <= ids:
            raise InputError("'relevant' names ids that are not candidates", line=lineno)
        table = obj.get("scores_by_layer")
        if table is not None:
            if not isinstance(table, list) or any(
                not isinstance(row, list) or len(row) != len(cands) for row in table
            ):
                raise InputError("'scores_by_layer' must be layers x candidates", line=lineno)
        batch = CandidateBatch.from_pairs(query, cands)
        records.append(EvalRecord(batch.query, batch, relevant, table))
    if not records:
        raise ContractError("dataset is empty")
    return records


def write_dataset(path, records):
    """Inverse of :func:`read_dataset` for token-level records."""
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            b = rec.batch
            qlen = len(b.query)
            obj = {
                "query": list(b.query),
                "candidates": [
                    {"id": cid, "tokens": list(seq[qlen:])}
                    for cid, seq in zip(b.candidate_ids, b.sequences)
                ],
                "relevant": sorted(rec.relevant, key=str),
            }
            if rec.scores_by_layer is not None:
                obj["scores_by_layer"] = [list(map(float, row)) for row in rec.scores_by_layer]
            f.write(json.dumps(obj) + "\n")
