#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace charform {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& msg, std::size_t offset)
      : std::runtime_error(msg), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class EvalError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EvalFlags {
  bool domain_error = false;
  bool non_finite = false;
};

// ---------------------------------------------------------------------------
// Forward-mode dual numbers. Nesting Dual<Dual<double>> gives second
// derivatives, which the forms module needs for d(d omega).
// ---------------------------------------------------------------------------

template <class T>
struct Dual {
  T v{};
  T d{};
  Dual() = default;
  Dual(double x) : v(x), d() {}  // constants carry zero derivative
  Dual(T value, T deriv) : v(std::move(value)), d(std::move(deriv)) {}
};

inline double value_of(double x) { return x; }
template <class T>
double value_of(const Dual<T>& x) {
  return value_of(x.v);
}

template <class T>
Dual<T> operator+(const Dual<T>& a, const Dual<T>& b) {
  return {a.v + b.v, a.d + b.d};
}
template <class T>
Dual<T> operator-(const Dual<T>& a, const Dual<T>& b) {
  return {a.v - b.v, a.d - b.d};
}
template <class T>
Dual<T> operator*(const Dual<T>& a, const Dual<T>& b) {
  return {a.v * b.v, a.d * b.v + a.v * b.d};
}
template <class T>
Dual<T> operator/(const Dual<T>& a, const Dual<T>& b) {
  return {a.v / b.v, (a.d * b.v - a.v * b.d) / (b.v * b.v)};
}
template <class T>
Dual<T> operator-(const Dual<T>& a) {
  return {-a.v, -a.d};
}
template <class T>
Dual<T> operator+(const Dual<T>& a, double b) {
  return a + Dual<T>(b);
}
template <class T>
Dual<T> operator+(double a, const Dual<T>& b) {
  return Dual<T>(a) + b;
}
template <class T>
Dual<T> operator-(const Dual<T>& a, double b) {
  return a - Dual<T>(b);
}
template <class T>
Dual<T> operator-(double a, const Dual<T>& b) {
  return Dual<T>(a) - b;
}
template <class T>
Dual<T> operator*(const Dual<T>& a, double b) {
  return a * Dual<T>(b);
}
template <class T>
Dual<T> operator*(double a, const Dual<T>& b) {
  return Dual<T>(a) * b;
}
template <class T>
Dual<T> operator/(const Dual<T>& a, double b) {
  return a / Dual<T>(b);
}
template <class T>
Dual<T> operator/(double a, const Dual<T>& b) {
  return Dual<T>(a) / b;
}

template <class T>
Dual<T> sin(const Dual<T>& a) {
  using std::cos;
  using std::sin;
  return {sin(a.v), a.d * cos(a.v)};
}
template <class T>
Dual<T> cos(const Dual<T>& a) {
  using std::cos;
  using std::sin;
  return {cos(a.v), -(a.d * sin(a.v))};
}
template <class T>
Dual<T> exp(const Dual<T>& a) {
  using std::exp;
  T e = exp(a.v);
  return {e, a.d * e};
}
template <class T>
Dual<T> log(const Dual<T>& a) {
  using std::log;
  return {log(a.v), a.d / a.v};
}
template <class T>
Dual<T> sqrt(const Dual<T>& a) {
  using std::sqrt;
  T r = sqrt(a.v);
  return {r, a.d / (2.0 * r)};
}
template <class T>
Dual<T> abs(const Dual<T>& a) {
  using std::abs;
  double s = value_of(a.v) < 0 ? -1.0 : (value_of(a.v) > 0 ? 1.0 : 0.0);
  return {abs(a.v), a.d * s};
}

inline double pow_const(double a, double c) { return std::pow(a, c); }
template <class T>
Dual<T> pow_const(const Dual<T>& a, double c) {
  return {pow_const(a.v, c), a.d * (c * pow_const(a.v, c - 1.0))};
}

// ---------------------------------------------------------------------------
// AST
// ---------------------------------------------------------------------------

struct Node;
using NodePtr = std::shared_ptr<const Node>;

struct Node {
  enum class Kind { Number, Variable, Unary, Binary, Call };
  Kind kind;
  double number = 0.0;
  std::string name;  // variable or function name
  char op = 0;       // + - * / ^
  NodePtr lhs;
  NodePtr rhs;
};

inline NodePtr make_number(double v) {
  auto n = std::make_shared<Node>();
  n->kind = Node::Kind::Number;
  n->number = v;
  return n;
}
inline NodePtr make_variable(std::string name) {
  auto n = std::make_shared<Node>();
  n->kind = Node::Kind::Variable;
  n->name = std::move(name);
  return n;
}
inline NodePtr make_unary(NodePtr a) {
  auto n = std::make_shared<Node>();
  n->kind = Node::Kind::Unary;
  n->op = '-';
  n->lhs = std::move(a);
  return n;
}
inline NodePtr make_binary(char op, NodePtr a, NodePtr b) {
  auto n = std::make_shared<Node>();
  n->kind = Node::Kind::Binary;
  n->op = op;
  n->lhs = std::move(a);
  n->rhs = std::move(b);
  return n;
}
inline NodePtr make_call(std::string fn, NodePtr a) {
  auto n = std::make_shared<Node>();
  n->kind = Node::Kind::Call;
  n->name = std::move(fn);
  n->lhs = std::move(a);
  return n;
}

inline bool node_equal(const Node& a, const Node& b) {
  if (a.kind != b.kind) return false;
  switch (a.kind) {
    case Node::Kind::Number:
      return a.number == b.number;
    case Node::Kind::Variable:
      return a.name == b.name;
    case Node::Kind::Unary:
      return node_equal(*a.lhs, *b.lhs);
    case Node::Kind::Binary:
      return a.op == b.op && node_equal(*a.lhs, *b.lhs) &&
             node_equal(*a.rhs, *b.rhs);
    case Node::Kind::Call:
      return a.name == b.name && node_equal(*a.lhs, *b.lhs);
  }
  return false;
}

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void collect_variables(const Node& n, std::vector<std::string>& out) {
  switch (n.kind) {
    case Node::Kind::Variable:
      for (const auto& s : out)
        if (s == n.name) return;
      out.push_back(n.name);
      break;
    case Node::Kind::Unary:
    case Node::Kind::Call:
      collect_variables(*n.lhs, out);
      break;
    case Node::Kind::Binary:
      collect_variables(*n.lhs, out);
      collect_variables(*n.rhs, out);
      break;
    default:
      break;
  }
}

inline void serialize_node(const Node& n, std::string& out) {
  switch (n.kind) {
    case Node::Kind::Number:
      out += format_double(n.number);
      break;
    case Node::Kind::Variable:
      out += n.name;
      break;
    case Node::Kind::Unary:
      out += "(-";
      serialize_node(*n.lhs, out);
      out += ')';
      break;
    case Node::Kind::Binary:
      out += '(';
      serialize_node(*n.lhs, out);
      out += ' ';
      out += n.op;
      out += ' ';
      serialize_node(*n.rhs, out);
      out += ')';
      break;
    case Node::Kind::Call:
      out += n.name;
      out += '(';
      serialize_node(*n.lhs, out);
      out += ')';
      break;
  }
}

// Evaluates a variable-free subtree, if it is one.
inline std::optional<double> fold_constant(const Node& n) {
  switch (n.kind) {
    case Node::Kind::Number:
      return n.number;
    case Node::Kind::Variable:
      return std::nullopt;
    case Node::Kind::Unary: {
      auto a = fold_constant(*n.lhs);
      if (!a) return std::nullopt;
      return -*a;
    }
    case Node::Kind::Binary: {
      auto a = fold_constant(*n.lhs);
      auto b = fold_constant(*n.rhs);
      if (!a || !b) return std::nullopt;
      switch (n.op) {
        case '+':
          return *a + *b;
        case '-':
          return *a - *b;
        case '*':
          return *a * *b;
        case '/':
          return *a / *b;
        case '^':
          return std::pow(*a, *b);
      }
      return std::nullopt;
    }
    case Node::Kind::Call: {
      auto a = fold_constant(*n.lhs);
      if (!a) return std::nullopt;
      if (n.name == "sin") return std::sin(*a);
      if (n.name == "cos") return std::cos(*a);
      if (n.name == "exp") return std::exp(*a);
      if (n.name == "log") return std::log(*a);
      if (n.name == "sqrt") return std::sqrt(*a);
      if (n.name == "abs") return std::abs(*a);
      return std::nullopt;
    }
  }
  return std::nullopt;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Compiled postorder program: variables resolved to slots once, then
// evaluated over any scalar type (double, Dual<double>, Dual<Dual<double>>).
// ---------------------------------------------------------------------------

enum class OpCode : std::uint8_t {
  PushConst,
  PushVar,
  Neg,
  Add,
  Sub,
  Mul,
  Div,
  PowConst,
  Pow,
  Sin,
  Cos,
  Exp,
  Log,
  Sqrt,
  Abs
};

struct Instr {
  OpCode op;
  std::int32_t slot = -1;
  double value = 0.0;
};

class Program {
 public:
  Program() = default;

  static Program compile(const Node& root,
                         std::span<const std::string> order) {
    Program p;
    p.nvars_ = static_cast<int>(order.size());
    std::map<std::string, int> slots;
    for (std::size_t i = 0; i < order.size(); ++i)
      slots[order[i]] = static_cast<int>(i);
    p.emit(root, slots);
    return p;
  }

  int variable_count() const { return nvars_; }

  template <class T>
  T eval(std::span<const T> vars, EvalFlags* flags = nullptr) const {
    EvalFlags local;
    EvalFlags& fl = flags ? *flags : local;
    std::vector<T> st;
    st.reserve(16);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    using std::abs;
    using std::cos;
    using std::exp;
    using std::log;
    using std::sin;
    using std::sqrt;
    for (const Instr& in : code_) {
      switch (in.op) {
        case OpCode::PushConst:
          st.push_back(T(in.value));
          break;
        case OpCode::PushVar:
          st.push_back(vars[static_cast<std::size_t>(in.slot)]);
          break;
        case OpCode::Neg:
          st.back() = -st.back();
          break;
        case OpCode::Add: {
          T b = st.back();
          st.pop_back();
          st.back() = st.back() + b;
          break;
        }
        case OpCode::Sub: {
          T b = st.back();
          st.pop_back();
          st.back() = st.back() - b;
          break;
        }
        case OpCode::Mul: {
          T b = st.back();
          st.pop_back();
          st.back() = st.back() * b;
          break;
        }
        case OpCode::Div: {
          T b = st.back();
          st.pop_back();
          st.back() = st.back() / b;
          break;
        }
        case OpCode::PowConst: {
          double c = in.value;
          double base = value_of(st.back());
          if (base < 0.0 && c != std::rint(c)) {
            fl.domain_error = true;
            st.back() = T(nan);
          } else {
            st.back() = pow_const(st.back(), c);
          }
          break;
        }
        case OpCode::Pow: {
          T b = st.back();
          st.pop_back();
          if (value_of(st.back()) > 0.0) {
            st.back() = exp(b * log(st.back()));
          } else {
            fl.domain_error = true;
            st.back() = T(nan);
          }
          break;
        }
        case OpCode::Sin:
          st.back() = sin(st.back());
          break;
        case OpCode::Cos:
          st.back() = cos(st.back());
          break;
        case OpCode::Exp:
          st.back() = exp(st.back());
          break;
        case OpCode::Log:
          if (value_of(st.back()) < 0.0) fl.domain_error = true;
          st.back() = log(st.back());
          break;
        case OpCode::Sqrt:
          if (value_of(st.back()) < 0.0) fl.domain_error = true;
          st.back() = sqrt(st.back());
          break;
        case OpCode::Abs:
          st.back() = abs(st.back());
          break;
      }
    }
    T result = st.back();
    if (!std::isfinite(value_of(result))) fl.non_finite = true;
    return result;
  }

 private:
  void emit(const Node& n, const std::map<std::string, int>& slots) {
    switch (n.kind) {
      case Node::Kind::Number:
        code_.push_back({OpCode::PushConst, -1, n.number});
        break;
      case Node::Kind::Variable: {
        auto it = slots.find(n.name);
        if (it == slots.end())
          throw EvalError("unbound variable '" + n.name + "'");
        code_.push_back({OpCode::PushVar, it->second, 0.0});
        break;
      }
      case Node::Kind::Unary:
        emit(*n.lhs, slots);
        code_.push_back({OpCode::Neg, -1, 0.0});
        break;
      case Node::Kind::Binary: {
        if (n.op == '^') {
          if (auto c = detail::fold_constant(*n.rhs)) {
            emit(*n.lhs, slots);
            code_.push_back({OpCode::PowConst, -1, *c});
            break;
          }
        }
        emit(*n.lhs, slots);
        emit(*n.rhs, slots);
        OpCode op;
        switch (n.op) {
          case '+':
            op = OpCode::Add;
            break;
          case '-':
            op = OpCode::Sub;
            break;
          case '*':
            op = OpCode::Mul;
            break;
          case '/':
            op = OpCode::Div;
            break;
          default:
            op = OpCode::Pow;
            break;
        }
        code_.push_back({op, -1, 0.0});
        break;
      }
      case Node::Kind::Call: {
        emit(*n.lhs, slots);
        OpCode op;
        if (n.name == "sin")
          op = OpCode::Sin;
        else if (n.name == "cos")
          op = OpCode::Cos;
        else if (n.name == "exp")
          op = OpCode::Exp;
        else if (n.name == "log")
          op = OpCode::Log;
        else if (n.name == "sqrt")
          op = OpCode::Sqrt;
        else
          op = OpCode::Abs;
        code_.push_back({op, -1, 0.0});
        break;
      }
    }
  }

  std::vector<Instr> code_;
  int nvars_ = 0;
};

// ---------------------------------------------------------------------------
// Expression: immutable parsed AST plus its free-variable set.
// ---------------------------------------------------------------------------

using Bindings = std::map<std::string, double>;

class Expression {
 public:
  Expression() = default;
  explicit Expression(NodePtr root) : root_(std::move(root)) {
    detail::collect_variables(*root_, variables_);
    program_ = Program::compile(*root_, variables_);
  }

  static Expression parse(std::string_view text);

  const NodePtr& root() const { return root_; }
  const std::vector<std::string>& variables() const { return variables_; }
  bool references(const std::string& name) const {
    for (const auto& v : variables_)
      if (v == name) return true;
    return false;
  }
  bool empty() const { return root_ == nullptr; }

  // Fully parenthesized infix; the canonical serialization.
  std::string serialize() const {
    std::string out;
    detail::serialize_node(*root_, out);
    return out;
  }

  bool structurally_equal(const Expression& other) const {
    return node_equal(*root_, *other.root_);
  }

  // Compiles against an explicit slot ordering; every free variable of the
  // expression must appear in `order`.
  Program compile(std::span<const std::string> order) const {
    return Program::compile(*root_, order);
  }

  const Program& program() const { return program_; }

  Expression renamed(const std::string& from, const std::string& to) const {
    return Expression(rename_node(root_, from, to));
  }

 private:
  static NodePtr rename_node(const NodePtr& n, const std::string& from,
                             const std::string& to) {
    switch (n->kind) {
      case Node::Kind::Number:
        return n;
      case Node::Kind::Variable:
        return n->name == from ? make_variable(to) : n;
      case Node::Kind::Unary:
        return make_unary(rename_node(n->lhs, from, to));
      case Node::Kind::Binary:
        return make_binary(n->op, rename_node(n->lhs, from, to),
                           rename_node(n->rhs, from, to));
      case Node::Kind::Call:
        return make_call(n->name, rename_node(n->lhs, from, to));
    }
    return n;
  }

  NodePtr root_;
  std::vector<std::string> variables_;
  Program program_;
};

// ---------------------------------------------------------------------------
// Parser: precedence ^ > unary- > * / > + -, left-assoc except ^.
// ---------------------------------------------------------------------------

namespace detail {

struct Token {
  enum class Kind { Number, Ident, Op, LParen, RParen, End };
  Kind kind;
  double number = 0.0;
  std::string text;
  char op = 0;
  std::size_t offset = 0;
};

class Lexer {
 public:
  explicit Lexer(std::string_view s) : s_(s) { advance(); }
  const Token& peek() const { return tok_; }
  Token next() {
    Token t = tok_;
    advance();
    return t;
  }

 private:
  void advance() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_])))
      ++pos_;
    tok_.offset = pos_;
    if (pos_ >= s_.size()) {
      tok_.kind = Token::Kind::End;
      return;
    }
    char c = s_[pos_];
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
      const char* begin = s_.data() + pos_;
      char* end = nullptr;
      double v = std::strtod(begin, &end);
      if (end == begin)
        throw ParseError("syntax error at offset " + std::to_string(pos_) +
                             ": malformed number",
                         pos_);
      tok_.kind = Token::Kind::Number;
      tok_.number = v;
      pos_ += static_cast<std::size_t>(end - begin);
      return;
    }
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t start = pos_;
      while (pos_ < s_.size() &&
             (std::isalnum(static_cast<unsigned char>(s_[pos_])) ||
              s_[pos_] == '_'))
        ++pos_;
      tok_.kind = Token::Kind::Ident;
      tok_.text = std::string(s_.substr(start, pos_ - start));
      return;
    }
    switch (c) {
      case '+':
      case '-':
      case '*':
      case '/':
      case '^':
        tok_.kind = Token::Kind::Op;
        tok_.op = c;
        ++pos_;
        return;
      case '(':
        tok_.kind = Token::Kind::LParen;
        ++pos_;
        return;
      case ')':
        tok_.kind = Token::Kind::RParen;
        ++pos_;
        return;
      default:
        throw ParseError("syntax error at offset " + std::to_string(pos_) +
                             ": unexpected character '" + std::string(1, c) +
                             "'",
                         pos_);
    }
  }

  std::string_view s_;
  std::size_t pos_ = 0;
  Token tok_;
};

inline bool known_function(const std::string& name) {
  return name == "sin" || name == "cos" || name == "exp" || name == "log" ||
         name == "sqrt" || name == "abs";
}

class Parser {
 public:
  explicit Parser(std::string_view s) : lex_(s) {}

  NodePtr parse_expression() {
    NodePtr lhs = parse_term();
    while (lex_.peek().kind == Token::Kind::Op &&
           (lex_.peek().op == '+' || lex_.peek().op == '-')) {
      char op = lex_.next().op;
      lhs = make_binary(op, std::move(lhs), parse_term());
    }
    return lhs;
  }

  void expect_end() {
    if (lex_.peek().kind != Token::Kind::End)
      throw ParseError("syntax error at offset " +
                           std::to_string(lex_.peek().offset) +
                           ": trailing input",
                       lex_.peek().offset);
  }

 private:
  NodePtr parse_term() {
    NodePtr lhs = parse_unary();
    while (lex_.peek().kind == Token::Kind::Op &&
           (lex_.peek().op == '*' || lex_.peek().op == '/')) {
      char op = lex_.next().op;
      lhs = make_binary(op, std::move(lhs), parse_unary());
    }
    return lhs;
  }

  NodePtr parse_unary() {
    if (lex_.peek().kind == Token::Kind::Op && lex_.peek().op == '-') {
      lex_.next();
      return make_unary(parse_unary());
    }
    return parse_power();
  }

  NodePtr parse_power() {
    NodePtr base = parse_primary();
    if (lex_.peek().kind == Token::Kind::Op && lex_.peek().op == '^') {
      lex_.next();
      // right-assoc; exponent may carry a unary minus
      return make_binary('^', std::move(base), parse_unary());
    }
    return base;
  }

  NodePtr parse_primary() {
    Token t = lex_.next();
    switch (t.kind) {
      case Token::Kind::Number:
        return make_number(t.number);
      case Token::Kind::Ident: {
        if (lex_.peek().kind == Token::Kind::LParen) {
          if (!known_function(t.text))
            throw ParseError("unknown function name '" + t.text +
                                 "' at offset " + std::to_string(t.offset),
                             t.offset);
          lex_.next();
          NodePtr arg = parse_expression();
          Token close = lex_.next();
          if (close.kind != Token::Kind::RParen)
            throw ParseError("syntax error at offset " +
                                 std::to_string(close.offset) +
                                 ": expected ')'",
                             close.offset);
          return make_call(t.text, std::move(arg));
        }
        return make_variable(t.text);
      }
      case Token::Kind::LParen: {
        NodePtr inner = parse_expression();
        Token close = lex_.next();
        if (close.kind != Token::Kind::RParen)
          throw ParseError("syntax error at offset " +
                               std::to_string(close.offset) + ": expected ')'",
                           close.offset);
        return inner;
      }
      default:
        throw ParseError("syntax error at offset " + std::to_string(t.offset) +
                             ": expected operand",
                         t.offset);
    }
  }

  Lexer lex_;
};

}  // namespace detail

inline Expression Expression::parse(std::string_view text) {
  bool blank = true;
  for (char c : text)
    if (!std::isspace(static_cast<unsigned char>(c))) blank = false;
  if (blank) throw ParseError("empty input", 0);
  detail::Parser p(text);
  NodePtr root = p.parse_expression();
  p.expect_end();
  return Expression(std::move(root));
}

// ---------------------------------------------------------------------------
// Map-based evaluation API.
// ---------------------------------------------------------------------------

inline std::vector<double> bind_values(const Expression& e, const Bindings& b) {
  std::vector<double> vals;
  vals.reserve(e.variables().size());
  for (const auto& name : e.variables()) {
    auto it = b.find(name);
    if (it == b.end()) throw EvalError("unbound variable '" + name + "'");
    vals.push_back(it->second);
  }
  return vals;
}

inline double eval(const Expression& e, const Bindings& b,
                   EvalFlags* flags = nullptr) {
  std::vector<double> vals = bind_values(e, b);
  return e.program().eval<double>(vals, flags);
}

struct GradientResult {
  double value = 0.0;
  std::vector<double> gradient;
  EvalFlags flags;
};

// Exact first derivatives by one dual pass per requested variable.
inline GradientResult eval_with_gradient(
    const Expression& e, const Bindings& b,
    std::span<const std::string> wrt) {
  GradientResult out;
  std::vector<double> vals = bind_values(e, b);
  for (const auto& w : wrt)
    if (b.find(w) == b.end())
      throw EvalError("unbound variable '" + w + "'");
  out.value = e.program().eval<double>(vals, &out.flags);
  const auto& names = e.variables();
  std::vector<Dual<double>> dvals(vals.size());
  for (const auto& w : wrt) {
    int seed = -1;
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == w) seed = static_cast<int>(i);
    if (seed < 0) {
      out.gradient.push_back(0.0);  // variable bound but absent from the AST
      continue;
    }
    for (std::size_t i = 0; i < vals.size(); ++i)
      dvals[i] = Dual<double>(vals[i], i == static_cast<std::size_t>(seed)
                                           ? 1.0
                                           : 0.0);
    Dual<double> r =
        e.program().eval<Dual<double>>(dvals, &out.flags);
    out.gradient.push_back(r.d);
  }
  return out;
}

}  // namespace charform
