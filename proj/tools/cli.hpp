#pragma once

namespace normshift::cli {

// Exit codes: 0 ok, 1 IO or unreadable file, 2 validation, 3 numerical failure.
int run(int argc, char** argv);

}  // namespace normshift::cli
