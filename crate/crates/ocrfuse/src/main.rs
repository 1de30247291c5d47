fn main() {
    // die quietly when stdout is closed early (e.g. piped into head)
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    std::process::exit(ocrfuse::run_cli());
}
