#pragma once

#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tlab {

/// Minimal CSV emitter with a pinned float format ("%.10g") so identical runs
/// produce byte-identical files.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header)
      : out_(path), columns_(header.size()) {
    if (!out_) throw std::runtime_error("cannot open for writing: " + path);
    for (size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << header[i];
    out_ << '\n';
  }

  class Row {
   public:
    explicit Row(CsvWriter& w) : w_(w) {}
    Row& operator<<(double v) {
      char buf[48];
      std::snprintf(buf, sizeof buf, "%.10g", v);
      return put_(buf);
    }
    Row& operator<<(long v) { return put_(std::to_string(v)); }
    Row& operator<<(int v) { return put_(std::to_string(v)); }
    Row& operator<<(const std::string& v) { return put_(v); }
    Row& operator<<(const char* v) { return put_(v); }
    ~Row() {
      w_.out_ << '\n';
      // Column-count mismatches are programming errors; fail loudly.
      if (n_ != w_.columns_) std::terminate();
    }

   private:
    Row& put_(const std::string& s) {
      w_.out_ << (n_++ ? "," : "") << s;
      return *this;
    }
    CsvWriter& w_;
    size_t n_ = 0;
  };

  Row row() { return Row(*this); }
  void flush() { out_.flush(); }

 private:
  friend class Row;
  std::ofstream out_;
  size_t columns_;
};

inline std::string format_g10(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace tlab
