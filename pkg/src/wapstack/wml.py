"""WML-subset markup: parser, canonical serializer, tokenized binary codec.

The grammar is closed-world: seven tags (wml, card, p, br, a, do, template),
three attributes (id, title, href), double-quoted attribute values, and the
escapes ``&lt; &amp; &quot;`` in text and attribute values.  Text is ASCII;
whitespace-only text nodes between elements are dropped at parse time.

Binary form:

    version 0x01, string-table length uint16 (always 0x0000 in v1), then a
    pre-order token stream.  An element token is its tag code OR'd with
    HAS_ATTRS (0x80) and/or HAS_CONTENT (0x40); attributes are emitted as
    attribute code, STR_I value, and the list is terminated by END; children
    follow, terminated by END when HAS_CONTENT is set.  Text is
    STR_I + NUL-terminated bytes.

Both directions are pure functions; ``decode(encode(d)) == d`` as trees and
``parse(serialize(d)) == d``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

VERSION = 0x01
TOKEN_END = 0x01
TOKEN_STR_I = 0x03
FLAG_HAS_CONTENT = 0x40
FLAG_HAS_ATTRS = 0x80

TAG_CODES = {"wml": 0x05, "card": 0x06, "p": 0x07, "br": 0x08,
             "a": 0x09, "do": 0x0A, "template": 0x0B}
ATTR_CODES = {"id": 0x05, "title": 0x06, "href": 0x07}
_TAG_BY_CODE = {v: k for k, v in TAG_CODES.items()}
_ATTR_BY_CODE = {v: k for k, v in ATTR_CODES.items()}

_ENTITIES = {"lt": "<", "amp": "&", "quot": '"'}


class WmlError(Exception):
    pass


class ParseError(WmlError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{message} at line {line}, column {col}")
        self.line = line
        self.col = col


class MalformedBinary(WmlError):
    pass


class UnencodableText(WmlError):
    pass


@dataclass
class Text:
    text: str


@dataclass
class Element:
    tag: str
    attrs: list[tuple[str, str]] = field(default_factory=list)
    children: list = field(default_factory=list)


@dataclass
class Document:
    root: Element


# --- parser -------------------------------------------------------------------

class _Cursor:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.line = 1
        self.col = 1

    def error(self, message: str) -> ParseError:
        return ParseError(message, self.line, self.col)

    def eof(self) -> bool:
        return self.pos >= len(self.text)

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def startswith(self, s: str) -> bool:
        return self.text.startswith(s, self.pos)

    def take(self, n: int = 1) -> str:
        chunk = self.text[self.pos:self.pos + n]
        if len(chunk) < n:
            raise self.error("unexpected end of input")
        for ch in chunk:
            if ord(ch) > 0x7F:
                raise self.error(f"non-ASCII character {ch!r}")
            if ch == "\n":
                self.line += 1
                self.col = 1
            else:
                self.col += 1
        self.pos += n
        return chunk

    def expect(self, s: str) -> None:
        if not self.startswith(s):
            raise self.error(f"expected {s!r}")
        self.take(len(s))

    def skip_ws(self) -> None:
        while self.peek() in (" ", "\t", "\r", "\n") and self.peek():
            self.take()


def _read_name(cur: _Cursor) -> str:
    start = cur.pos
    while cur.peek().isalnum() or cur.peek() in ("-", "_"):
        cur.take()
    if cur.pos == start:
        raise cur.error("expected a name")
    return cur.text[start:cur.pos]


def _read_entity(cur: _Cursor) -> str:
    cur.expect("&")
    name = ""
    while cur.peek() and cur.peek() != ";":
        name += cur.take()
        if len(name) > 8:
            break
    if cur.peek() != ";" or name not in _ENTITIES:
        raise cur.error(f"bad escape &{name}")
    cur.take()
    return _ENTITIES[name]


def _read_text(cur: _Cursor) -> str:
    out = []
    while not cur.eof() and cur.peek() != "<":
        if cur.peek() == "&":
            out.append(_read_entity(cur))
        else:
            ch = cur.take()
            if ch == "\x00":
                raise cur.error("NUL in text")
            out.append(ch)
    return "".join(out)


def _read_attr_value(cur: _Cursor) -> str:
    cur.expect('"')
    out = []
    while cur.peek() != '"':
        if cur.eof():
            raise cur.error("unterminated attribute value")
        if cur.peek() == "&":
            out.append(_read_entity(cur))
        else:
            out.append(cur.take())
    cur.take()
    return "".join(out)


def _read_element(cur: _Cursor) -> Element:
    cur.expect("<")
    tag = _read_name(cur)
    if tag not in TAG_CODES:
        raise cur.error(f"unknown tag <{tag}>")
    attrs: list[tuple[str, str]] = []
    while True:
        before = cur.pos
        cur.skip_ws()
        if cur.peek() in (">", "/") or cur.eof():
            break
        if cur.pos == before:
            raise cur.error("expected whitespace before attribute")
        name = _read_name(cur)
        if name not in ATTR_CODES:
            raise cur.error(f"unknown attribute {name!r}")
        if any(n == name for n, _ in attrs):
            raise cur.error(f"duplicate attribute {name!r}")
        cur.expect("=")
        attrs.append((name, _read_attr_value(cur)))
    element = Element(tag, attrs)
    if cur.startswith("/>"):
        cur.take(2)
        return element
    cur.expect(">")
    while True:
        if cur.eof():
            raise cur.error(f"unclosed <{tag}>")
        if cur.startswith("</"):
            cur.take(2)
            closing = _read_name(cur)
            if closing != tag:
                raise cur.error(f"mismatched tag: <{tag}> closed by </{closing}>")
            cur.expect(">")
            break
        if cur.peek() == "<":
            element.children.append(_read_element(cur))
        else:
            text = _read_text(cur)
            if text.strip():
                element.children.append(Text(text))
            # whitespace-only text between elements is dropped
    if element.tag == "br" and element.children:
        raise cur.error("<br> must be empty")
    return element


def parse(text: str) -> Document:
    cur = _Cursor(text)
    cur.skip_ws()
    root = _read_element(cur)
    cur.skip_ws()
    if not cur.eof():
        raise cur.error("content after the root element")
    if root.tag != "wml":
        raise ParseError("root element must be <wml>", 1, 1)
    return Document(root)


# --- canonical serializer -------------------------------------------------------

def _escape_text(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;")


def _escape_attr(value: str) -> str:
    return value.replace("&", "&amp;").replace('"', "&quot;")


def _serialize_element(el: Element, out: list[str]) -> None:
    out.append(f"<{el.tag}")
    for name, value in el.attrs:
        out.append(f' {name}="{_escape_attr(value)}"')
    if not el.children:
        out.append("/>")
        return
    out.append(">")
    for child in el.children:
        if isinstance(child, Text):
            out.append(_escape_text(child.text))
        else:
            _serialize_element(child, out)
    out.append(f"</{el.tag}>")


def serialize(doc: Document) -> str:
    out: list[str] = []
    _serialize_element(doc.root, out)
    return "".join(out)


# --- binary codec ----------------------------------------------------------------

def _encode_string(text: str) -> bytes:
    try:
        raw = text.encode("ascii")
    except UnicodeEncodeError:
        raise UnencodableText(f"non-ASCII text {text!r}") from None
    if b"\x00" in raw:
        raise UnencodableText("embedded NUL in text")
    return bytes([TOKEN_STR_I]) + raw + b"\x00"


def _encode_element(el: Element, out: bytearray) -> None:
    token = TAG_CODES[el.tag]
    if el.attrs:
        token |= FLAG_HAS_ATTRS
    if el.children:
        token |= FLAG_HAS_CONTENT
    out.append(token)
    if el.attrs:
        for name, value in el.attrs:
            out.append(ATTR_CODES[name])
            out += _encode_string(value)
        out.append(TOKEN_END)
    for child in el.children:
        if isinstance(child, Text):
            out += _encode_string(child.text)
        else:
            _encode_element(child, out)
    if el.children:
        out.append(TOKEN_END)


def encode(doc: Document) -> bytes:
    out = bytearray([VERSION, 0x00, 0x00])  # version, empty string table
    _encode_element(doc.root, out)
    return bytes(out)


class _BinCursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def byte(self) -> int:
        if self.pos >= len(self.data):
            raise MalformedBinary("truncated token stream")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def peek(self) -> int:
        if self.pos >= len(self.data):
            raise MalformedBinary("truncated token stream")
        return self.data[self.pos]

    def cstring(self) -> str:
        end = self.data.find(b"\x00", self.pos)
        if end < 0:
            raise MalformedBinary("unterminated string")
        raw = self.data[self.pos:end]
        self.pos = end + 1
        if any(b >= 0x80 for b in raw):
            raise MalformedBinary("non-ASCII byte in string")
        return raw.decode("ascii")


def _decode_element(cur: _BinCursor) -> Element:
    token = cur.byte()
    code = token & 0x3F
    tag = _TAG_BY_CODE.get(code)
    if tag is None:
        raise MalformedBinary(f"unknown tag token {token:#04x}")
    element = Element(tag)
    if token & FLAG_HAS_ATTRS:
        while True:
            b = cur.byte()
            if b == TOKEN_END:
                break
            name = _ATTR_BY_CODE.get(b)
            if name is None:
                raise MalformedBinary(f"unknown attribute token {b:#04x}")
            if cur.byte() != TOKEN_STR_I:
                raise MalformedBinary("attribute value must be STR_I")
            element.attrs.append((name, cur.cstring()))
    if token & FLAG_HAS_CONTENT:
        while True:
            b = cur.peek()
            if b == TOKEN_END:
                cur.byte()
                break
            if b == TOKEN_STR_I:
                cur.byte()
                element.children.append(Text(cur.cstring()))
            else:
                element.children.append(_decode_element(cur))
        if not element.children:
            raise MalformedBinary("HAS_CONTENT set but no children")
    return element


def decode(data: bytes) -> Document:
    if len(data) < 4:
        raise MalformedBinary("shorter than header plus one token")
    if data[0] != VERSION:
        raise MalformedBinary(f"unsupported version {data[0]:#04x}")
    strtbl_len = int.from_bytes(data[1:3], "big")
    if strtbl_len != 0:
        raise MalformedBinary("v1 string table must be empty")
    cur = _BinCursor(data)
    cur.pos = 3
    root = _decode_element(cur)
    if cur.pos != len(data):
        raise MalformedBinary("trailing bytes after the document")
    if root.tag != "wml":
        raise MalformedBinary("root element must be wml")
    return Document(root)
