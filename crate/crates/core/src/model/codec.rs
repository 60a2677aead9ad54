use crate::error::{ErrorCode, ProtocolError, ProtocolResult};

use super::Message;

/// Canonical single-line encoding: compact JSON with keys in the order
/// `seq, thread, sender, kind, body, mentions, ts_ms`, terminated by `\n`.
pub fn encode_message(m: &Message) -> ProtocolResult<Vec<u8>> {
    m.validate()?;
    let mut out = serde_json::to_vec(m)
        .map_err(|e| ProtocolError::new(ErrorCode::EncodingError, e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

/// Inverse of [`encode_message`]; accepts the line with or without its
/// trailing newline.
pub fn decode_message(bytes: &[u8]) -> ProtocolResult<Message> {
    let line = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    let text = std::str::from_utf8(line)
        .map_err(|e| ProtocolError::new(ErrorCode::EncodingError, format!("invalid UTF-8: {e}")))?;
    let m: Message = serde_json::from_str(text)
        .map_err(|e| ProtocolError::new(ErrorCode::EncodingError, e.to_string()))?;
    m.validate()?;
    Ok(m)
}

/// Concatenated canonical encodings of a message log.
pub fn encode_transcript(messages: &[Message]) -> Vec<u8> {
    let mut out = Vec::new();
    for m in messages {
        // Stored messages were validated on the way in.
        out.extend(encode_message(m).expect("stored message encodes"));
    }
    out
}
