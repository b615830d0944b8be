"""memcached server built as a streaming pipeline of bounded-channel stages."""

from flowcache.pipeline import Pipeline, PipelineConfig, ThreadedRunner, build_pipeline, run_trace
from flowcache.wordstream import BoundedChannel, StreamWord, pack_words, unpack_words

__all__ = [
    "BoundedChannel",
    "Pipeline",
    "PipelineConfig",
    "StreamWord",
    "ThreadedRunner",
    "build_pipeline",
    "pack_words",
    "run_trace",
    "unpack_words",
]
__version__ = "0.1.0"
