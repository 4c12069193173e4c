fn main() {
    println!("da-detect: CLI not wired yet");
}
