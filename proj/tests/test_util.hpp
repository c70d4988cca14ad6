#pragma once

#include <gtest/gtest.h>

#include <functional>
#include <string>

#include "sift/error.hpp"

inline sift::Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const sift::Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected sift::Error";
  return sift::Errc::IoError;
}

inline std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const sift::Error& e) {
    return e.what();
  }
  return {};
}
