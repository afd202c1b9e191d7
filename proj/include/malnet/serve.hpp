#pragma once

// In-process predictor and the HTTP service around it.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "malnet/checkpoint.hpp"
#include "malnet/data.hpp"
#include "malnet/error.hpp"
#include "malnet/model.hpp"

namespace malnet {

inline constexpr std::size_t kMaxUploadBytes = 5 * 1024 * 1024;

/// A request the service refuses; carries the wire error code and HTTP status.
class ServeError : public Error {
 public:
  ServeError(std::string code, int status, const std::string& message)
      : Error(message), code_(std::move(code)), status_(status) {}
  const std::string& code() const noexcept { return code_; }
  int status() const noexcept { return status_; }

 private:
  std::string code_;
  int status_;
};

struct Prediction {
  std::string label;
  std::map<std::string, double> probabilities;
  std::string model_version;

  friend bool operator==(const Prediction&, const Prediction&) = default;
};

inline nlohmann::json to_json(const Prediction& p) {
  return {{"label", p.label}, {"probabilities", p.probabilities}, {"model_version", p.model_version}};
}

inline nlohmann::json error_body(const std::string& code, const std::string& message) {
  return {{"error", code}, {"message", message}};
}

/// Holds one read-only model. predict() is safe to call concurrently.
class Predictor {
 public:
  Predictor() = default;
  Predictor(std::shared_ptr<const ModelGraph<float>> model, std::string version)
      : model_(std::move(model)), version_(std::move(version)) {}

  static Predictor from_file(const std::filesystem::path& path) {
    const auto bytes = read_checkpoint_bytes(path);
    auto model = std::make_shared<const ModelGraph<float>>(deserialize_checkpoint<float>(bytes));
    return Predictor(std::move(model), checkpoint_version(bytes));
  }

  bool loaded() const noexcept { return model_ != nullptr; }
  const std::string& model_version() const noexcept { return version_; }
  const ModelGraph<float>* model() const noexcept { return model_.get(); }

  Prediction predict(std::span<const std::uint8_t> bytes) const {
    if (!model_) throw ServeError("model_unavailable", 503, "no model is loaded");
    if (bytes.size() > kMaxUploadBytes)
      throw ServeError("too_large", 413,
                       "image is " + std::to_string(bytes.size()) + " bytes, limit is " +
                           std::to_string(kMaxUploadBytes));
    Tensor<float> image;
    try {
      image = preprocess_image<float>(bytes, model_->config().input_size);
    } catch (const DecodeError& e) {
      throw ServeError("decode_error", 400, e.what());
    }
    const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
    if (C != model_->config().input_channels)
      throw ServeError("decode_error", 400, "image has " + std::to_string(C) + " channels");
    image.reshape({1, C, H, W});
    const Tensor<float> probs = model_->predict_proba(image);

    Prediction p;
    p.model_version = version_;
    const auto& names = model_->class_names();
    std::size_t best = 0;
    for (std::size_t k = 0; k < names.size(); ++k) {
      p.probabilities[names[k]] = static_cast<double>(probs[k]);
      if (probs[k] > probs[best]) best = k;  // strict: ties keep the lower index
    }
    p.label = names[best];
    return p;
  }

 private:
  std::shared_ptr<const ModelGraph<float>> model_;
  std::string version_;
};

struct ServiceOptions {
  std::string cors_origin = "*";  // empty disables CORS headers
  std::size_t max_upload_bytes = kMaxUploadBytes;
};

/// HTTP front end: GET /api/v1/health, POST /api/v1/predict (multipart field "image").
class Service {
 public:
  explicit Service(Predictor predictor, ServiceOptions options = {})
      : predictor_(std::move(predictor)), options_(std::move(options)) {
    // Let oversized bodies reach the handler so they get a JSON 413; the
    // transport cap only guards against unbounded uploads.
    server_.set_payload_max_length(options_.max_upload_bytes * 4 + 64 * 1024);

    server_.Get("/api/v1/health", [this](const httplib::Request&, httplib::Response& res) {
      nlohmann::json body = {{"status", predictor_.loaded() ? "ok" : "unavailable"},
                             {"model_version", predictor_.model_version()}};
      res.status = predictor_.loaded() ? 200 : 503;
      if (!predictor_.loaded()) body = error_body("model_unavailable", "no model is loaded");
      res.set_content(body.dump(), "application/json");
    });

    server_.Post("/api/v1/predict", [this](const httplib::Request& req, httplib::Response& res) {
      handle_predict(req, res);
    });

    server_.Options(R"(/api/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    server_.set_post_routing_handler([this](const httplib::Request&, httplib::Response& res) {
      if (options_.cors_origin.empty()) return;
      res.set_header("Access-Control-Allow-Origin", options_.cors_origin);
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
    });

    server_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string msg = "internal error";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        msg = e.what();
      } catch (...) {
      }
      res.status = 500;
      res.set_content(error_body("internal_error", msg).dump(), "application/json");
    });

    // Anything else that ends >= 400 without a body gets the JSON error shape.
    server_.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
      std::string code = "http_error";
      switch (res.status) {
        case 400: code = "bad_request"; break;
        case 404: code = "not_found"; break;
        case 405: code = "method_not_allowed"; break;
        case 413: code = "too_large"; break;
        default: break;
      }
      res.set_content(error_body(code, httplib::status_message(res.status)).dump(), "application/json");
      return httplib::Server::HandlerResponse::Handled;
    });
  }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  ~Service() { stop(); }

  /// Binds; port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
    return bound;
  }

  /// Blocks until stop() is called.
  void listen() { server_.listen_after_bind(); }

  /// Runs listen() on a background thread and waits until it accepts.
  void start() {
    thread_ = std::thread([this] { listen(); });
    server_.wait_until_ready();
  }

  /// Stops accepting; in-flight requests complete before the workers join.
  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  const Predictor& predictor() const noexcept { return predictor_; }

 private:
  void handle_predict(const httplib::Request& req, httplib::Response& res) {
    auto fail = [&res](int status, const std::string& code, const std::string& msg) {
      res.status = status;
      res.set_content(error_body(code, msg).dump(), "application/json");
    };
    if (!predictor_.loaded()) return fail(503, "model_unavailable", "no model is loaded");
    if (!req.is_multipart_form_data() || !req.has_file("image"))
      return fail(400, "decode_error", "expected multipart/form-data with an \"image\" field");
    const auto file = req.get_file_value("image");
    if (file.content.size() > options_.max_upload_bytes)
      return fail(413, "too_large",
                  "image is " + std::to_string(file.content.size()) + " bytes, limit is " +
                      std::to_string(options_.max_upload_bytes));
    try {
      const auto* data = reinterpret_cast<const std::uint8_t*>(file.content.data());
      const Prediction p = predictor_.predict({data, file.content.size()});
      res.status = 200;
      res.set_content(to_json(p).dump(), "application/json");
    } catch (const ServeError& e) {
      fail(e.status(), e.code(), e.what());
    }
  }

  Predictor predictor_;
  ServiceOptions options_;
  httplib::Server server_;
  std::thread thread_;
};

}  // namespace malnet
