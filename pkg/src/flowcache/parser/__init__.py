"""Request parser stage: protocol detection plus binary and ASCII request parsing."""

from flowcache.parser.ascii import parse_ascii
from flowcache.parser.binary import BinaryHeader, parse_binary
from flowcache.parser.numeric import ascii_to_uint
from flowcache.parser.search import SearchVariant, find_delimiter
from flowcache.parser.stage import RequestParser, detect_protocol

__all__ = [
    "BinaryHeader",
    "RequestParser",
    "SearchVariant",
    "ascii_to_uint",
    "detect_protocol",
    "find_delimiter",
    "parse_ascii",
    "parse_binary",
]
