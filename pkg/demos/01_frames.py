"""
DNP3m frames on the wire
========================

Every protocol message travels as one or more two-byte-header frames.
"""

from porch.dnp3m import Direction, Frame, Message, StreamDecoder, decode_frame, encode_frame, fragment, reassemble

# %%
# A frame is a direction byte, a length byte that counts the header too,
# then the payload.
raw = encode_frame(Frame(Direction.RESPONSE, b"AB"))
print(raw.hex(" "))

frame, rest = decode_frame(raw + b"\x00\x02")
print(frame, "remainder:", rest.hex(" "))

# %%
# One length byte caps a frame at 255 bytes. Longer bodies are split, and a
# full frame means "more follows", so a body of exactly 253 bytes needs an
# empty frame to close it.
for size in (10, 253, 300, 700):
    frames = fragment(Message(Direction.REQUEST, bytes(size)))
    print(f"{size:4d} bytes ->", [f.total_length for f in frames])

# %%
# TCP hands us arbitrary slices of the stream. The decoder buffers partial
# frames until the length byte is satisfied.
msg = Message(Direction.REQUEST, b"x" * 600)
wire = b"".join(encode_frame(f) for f in fragment(msg))
decoder = StreamDecoder()
frames = []
for start in range(0, len(wire), 97):
    frames += decoder.feed(wire[start : start + 97])
print(len(frames), "frames, pending bytes:", decoder.pending)
assert reassemble(frames) == msg
