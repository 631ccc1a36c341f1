#include "covmoe/wire.hpp"

namespace covmoe {

void ByteWriter::text16(std::string_view s) {
    if (s.size() > 0xffff) throw ShapeError("label longer than 65535 bytes");
    u16(static_cast<std::uint16_t>(s.size()));
    raw(s.data(), s.size());
}

void ByteReader::fail(const std::string& what) const {
    const std::string msg = what + " at byte " + std::to_string(pos_);
    switch (on_error_) {
        case ErrorKind::protocol: throw ProtocolError(msg);
        case ErrorKind::harness: throw HarnessError(msg);
        case ErrorKind::ingest: throw IngestError(msg);
        default: throw CheckpointError(msg);
    }
}

std::uint64_t ByteReader::get(int n) {
    if (remaining() < static_cast<std::size_t>(n)) fail("truncated record");
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
}

std::string ByteReader::text16() {
    const std::size_t n = u16();
    auto r = raw(n);
    return std::string(r.begin(), r.end());
}

bool ByteReader::magic(std::string_view tag) {
    if (remaining() < tag.size()) return false;
    for (std::size_t i = 0; i < tag.size(); ++i)
        if (data_[pos_ + i] != static_cast<std::uint8_t>(tag[i])) return false;
    pos_ += tag.size();
    return true;
}

void ByteReader::expect_magic(std::string_view tag) {
    if (!magic(tag)) fail("expected record tag '" + std::string(tag) + "'");
}

Matrix ByteReader::matrix(std::size_t rows, std::size_t cols) {
    if (cols != 0 && rows > remaining() / 8 / cols) fail("matrix payload exceeds record");
    Matrix m(rows, cols);
    for (double& x : m.flat()) x = f64();
    return m;
}

std::span<const std::uint8_t> ByteReader::raw(std::size_t n) {
    if (remaining() < n) fail("truncated record");
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
}

}  // namespace covmoe
