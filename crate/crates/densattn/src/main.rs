fn main() {
    densattn::init_thread_pool_from_env();
    std::process::exit(2);
}
