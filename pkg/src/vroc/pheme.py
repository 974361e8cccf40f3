"""Convert a raw PHEME directory tree to the flat JSONL schema.

The distributed corpus is laid out as

    <root>/<event>[-all-rnr-threads]/{rumours,non-rumours}/<thread-id>/
        source-tweet/<tweet-id>.json
        annotation.json            (rumour threads only)

Detection labels come from the rumours / non-rumours folder; veracity
comes from annotation.json ("true": 1 -> True, "misinformation": 1 ->
False, otherwise Unverified).  Stance is not annotated in this corpus
and stays null.  Run as a module:

    python -m vroc.pheme RAW_DIR OUT.jsonl
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

log = logging.getLogger(__name__)

_EVENT_SUFFIX = "-all-rnr-threads"


def _load_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _veracity_from_annotation(path) -> str | None:
    if not os.path.isfile(path):
        return None
    try:
        ann = _load_json(path)
    except (json.JSONDecodeError, OSError) as exc:
        log.warning("unreadable annotation %s: %s", path, exc)
        return None

    def flag(key):
        v = ann.get(key)
        return str(v) in ("1", "True", "true")

    if flag("true"):
        return "True"
    if flag("misinformation"):
        return "False"
    return "Unverified"


def iter_source_tweets(root):
    """Yield (event, detection label, veracity, tweet dict) over the tree."""
    for event_dir in sorted(os.listdir(root)):
        event_path = os.path.join(root, event_dir)
        if not os.path.isdir(event_path):
            continue
        event = event_dir.removesuffix(_EVENT_SUFFIX)
        for folder, det in (("rumours", "Rumor"), ("non-rumours", "Nonrumor")):
            group = os.path.join(event_path, folder)
            if not os.path.isdir(group):
                continue
            for thread in sorted(os.listdir(group)):
                thread_path = os.path.join(group, thread)
                src_dir = os.path.join(thread_path, "source-tweet")
                if not os.path.isdir(src_dir):
                    continue
                veracity = None
                if det == "Rumor":
                    veracity = _veracity_from_annotation(
                        os.path.join(thread_path, "annotation.json"))
                for name in sorted(os.listdir(src_dir)):
                    if not name.endswith(".json"):
                        continue
                    try:
                        tweet = _load_json(os.path.join(src_dir, name))
                    except (json.JSONDecodeError, OSError) as exc:
                        log.warning("skipping unreadable tweet %s: %s",
                                    os.path.join(src_dir, name), exc)
                        continue
                    yield event, det, veracity, tweet


def convert(root, out_path) -> int:
    """Write the JSONL file; returns the number of examples written."""
    count = 0
    with open(out_path, "w", encoding="utf-8") as out:
        for event, det, veracity, tweet in iter_source_tweets(root):
            text = tweet.get("text")
            tweet_id = tweet.get("id_str") or str(tweet.get("id", ""))
            if not text or not tweet_id:
                log.warning("tweet without text or id in event %s; skipped", event)
                continue
            row = {
                "id": tweet_id,
                "text": text,
                "event": event,
                "labels": {"detection": det, "stance": None, "veracity": veracity},
            }
            out.write(json.dumps(row, ensure_ascii=False) + "\n")
            count += 1
    return count


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="python -m vroc.pheme",
        description="Convert a raw PHEME directory tree to flat JSONL.")
    parser.add_argument("root", help="corpus root (one directory per event)")
    parser.add_argument("out", help="output JSONL path")
    args = parser.parse_args(argv)
    if not os.path.isdir(args.root):
        print(f"error: {args.root} is not a directory", file=sys.stderr)
        return 1
    n = convert(args.root, args.out)
    print(f"wrote {n} examples to {args.out}")
    return 0 if n else 1


if __name__ == "__main__":
    raise SystemExit(main())
